"""Procedural face corpus with exact landmark boxes, plus dataset directory I/O.

Faces are drawn in normalized coordinates and rasterized with 4x4
supersampling, so every landmark box is known by construction.  Boxes are
``(y0, x0, y1, x1)`` pixel rectangles, top-left inclusive, bottom-right
exclusive.
"""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth",
                  "forehead", "left_cheek", "right_cheek", "chin")
CANONICAL_FEATURES = ("left_eye", "right_eye", "nose", "mouth")
SPLITS = ("train", "hold")
SPLIT_MODES = ("image_level", "identity_disjoint")

_SUPERSAMPLE = 4


class LandmarkError(ValueError):
    """Landmark box missing, empty, overlapping or outside the frame."""


class DataError(ValueError):
    """Unreadable or inconsistent dataset files."""


@dataclass(frozen=True)
class Box:
    y0: int
    x0: int
    y1: int
    x1: int

    @property
    def area(self) -> int:
        return max(0, self.y1 - self.y0) * max(0, self.x1 - self.x0)

    def inside(self, height: int, width: int) -> bool:
        return 0 <= self.y0 < self.y1 <= height and 0 <= self.x0 < self.x1 <= width

    def overlaps(self, other: "Box") -> bool:
        return (self.y0 < other.y1 and other.y0 < self.y1
                and self.x0 < other.x1 and other.x0 < self.x1)

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def as_dict(self) -> dict:
        return {"y0": self.y0, "x0": self.x0, "y1": self.y1, "x1": self.x1}


@dataclass(frozen=True)
class LandmarkMap:
    boxes: dict

    def __getitem__(self, name: str) -> Box:
        return self.boxes[name]

    def validate(self, height: int, width: int, disjoint: bool = True) -> "LandmarkMap":
        names = set(self.boxes)
        if names != set(LANDMARK_NAMES):
            missing = sorted(set(LANDMARK_NAMES) - names)
            extra = sorted(names - set(LANDMARK_NAMES))
            raise LandmarkError(f"landmark names wrong: missing {missing}, unexpected {extra}")
        for name in LANDMARK_NAMES:
            box = self.boxes[name]
            if not box.inside(height, width):
                raise LandmarkError(f"{name} box {box.as_dict()} empty or outside {height}x{width} frame")
        if disjoint:
            for i, a in enumerate(LANDMARK_NAMES):
                for b in LANDMARK_NAMES[i + 1:]:
                    if self.boxes[a].overlaps(self.boxes[b]):
                        raise LandmarkError(f"{a} and {b} boxes overlap")
        return self

    def to_json(self) -> dict:
        return {name: self.boxes[name].as_dict() for name in LANDMARK_NAMES}

    @classmethod
    def from_json(cls, obj: dict) -> "LandmarkMap":
        try:
            boxes = {name: Box(int(b["y0"]), int(b["x0"]), int(b["y1"]), int(b["x1"]))
                     for name, b in obj.items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise LandmarkError(f"malformed landmark box: {exc}") from exc
        return cls(boxes)


# ---------------------------------------------------------------------------
# Identities and rendering
# ---------------------------------------------------------------------------

# name -> (low, high); geometry in fractions of the frame, intensities in [0, 1]
PARAM_RANGES = {
    "face_cy": (0.52, 0.56), "face_cx": (0.47, 0.53),
    "face_ry": (0.40, 0.45), "face_rx": (0.33, 0.39),
    "eye_y": (0.34, 0.37), "eye_dx": (0.15, 0.19),
    "eye_ry": (0.035, 0.045), "eye_rx": (0.055, 0.085),
    "nose_top": (0.46, 0.48), "nose_len": (0.09, 0.13), "nose_hw": (0.045, 0.075),
    "mouth_y": (0.69, 0.73), "mouth_hh": (0.018, 0.035), "mouth_hw": (0.09, 0.15),
    "hairline": (0.17, 0.27),
    "background": (0.0, 0.3), "skin": (0.6, 0.85), "shade_x": (-0.12, 0.12),
    "shade_y": (-0.12, 0.12), "hair": (0.0, 0.4), "eye": (0.02, 0.2),
    "nose": (0.1, 0.22), "mouth": (0.1, 0.45),
}


@dataclass(frozen=True)
class FaceIdentity:
    id: int
    params: dict = field(hash=False)

    @classmethod
    def sample(cls, identity_id: int, rng: np.random.Generator) -> "FaceIdentity":
        params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()}
        return cls(int(identity_id), params)

    def validate(self) -> "FaceIdentity":
        for k, (lo, hi) in PARAM_RANGES.items():
            v = self.params.get(k)
            if v is None or not lo <= v <= hi:
                raise ValueError(f"identity {self.id}: parameter {k}={v} outside [{lo}, {hi}]")
        return self


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _span(lo: float, hi: float, n: int) -> tuple[int, int]:
    """Pixel index range whose centres fall inside [lo, hi] (normalized)."""
    a = int(math.floor(lo * n))
    b = int(math.ceil(hi * n))
    return a, b


def render_identity(identity: FaceIdentity, variation_seed: int = 0, jitter: float = 0.05,
                    shape=(32, 32, 1)) -> tuple[np.ndarray, LandmarkMap]:
    """Draw one "photo" of ``identity``; jitter moves features and intensities.

    With ``jitter == 0`` the seed is irrelevant and the render is canonical.
    """
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    H, W, C = (int(v) for v in shape)
    p = dict(identity.params)
    rng = np.random.default_rng([identity.id, int(variation_seed), 991])
    u = lambda: float(rng.uniform(-1.0, 1.0)) * jitter  # noqa: E731
    dy, dx = u(), u()
    # positions shift globally plus a smaller per-feature wobble
    geo = {
        "face_cy": p["face_cy"] + dy * 0.5, "face_cx": p["face_cx"] + dx * 0.5,
        "eye_y": p["eye_y"] + dy + 0.15 * u(), "eye_cx": p["face_cx"] + dx,
        "eye_dx": p["eye_dx"] + 0.1 * u(),
        "nose_top": p["nose_top"] + dy + 0.1 * u(), "nose_cx": p["face_cx"] + dx + 0.1 * u(),
        "mouth_y": p["mouth_y"] + dy + 0.15 * u(), "mouth_cx": p["face_cx"] + dx + 0.1 * u(),
        "hairline": p["hairline"] + dy + 0.1 * u(),
    }
    bright = 1.5 * u()
    inten = {k: p[k] + bright + 0.5 * u() for k in ("skin", "eye", "nose", "mouth", "hair")}
    inten["background"] = p["background"] + 0.5 * u()

    # identity geometry boxes (normalized)
    ey, ery, erx = geo["eye_y"], p["eye_ry"], p["eye_rx"]
    le_cx = geo["eye_cx"] - geo["eye_dx"]
    re_cx = geo["eye_cx"] + geo["eye_dx"]
    n_top, n_bot = geo["nose_top"], geo["nose_top"] + p["nose_len"]
    n_cx, n_hw = geo["nose_cx"], p["nose_hw"]
    m_y, m_hh, m_hw, m_cx = geo["mouth_y"], p["mouth_hh"], p["mouth_hw"], geo["mouth_cx"]

    def box(y_lo, y_hi, x_lo, x_hi) -> Box:
        y0, y1 = _span(y_lo, y_hi, H)
        x0, x1 = _span(x_lo, x_hi, W)
        return Box(y0, x0, y1, x1)

    b = {
        "left_eye": box(ey - ery, ey + ery, le_cx - erx, le_cx + erx),
        "right_eye": box(ey - ery, ey + ery, re_cx - erx, re_cx + erx),
        "nose": box(n_top, n_bot, n_cx - n_hw, n_cx + n_hw),
        "mouth": box(m_y - m_hh, m_y + m_hh, m_cx - m_hw, m_cx + m_hw),
    }
    # rounding can make neighbouring boxes touch; keep them row-disjoint
    eye_y1 = max(b["left_eye"].y1, b["right_eye"].y1)
    nb = b["nose"]
    b["nose"] = Box(max(nb.y0, eye_y1), nb.x0, max(nb.y1, eye_y1 + 1), nb.x1)
    mb = b["mouth"]
    b["mouth"] = Box(max(mb.y0, b["nose"].y1), mb.x0, max(mb.y1, b["nose"].y1 + 1), mb.x1)
    eye_top = min(b["left_eye"].y0, b["right_eye"].y0)
    eye_bot = max(b["left_eye"].y1, b["right_eye"].y1, b["nose"].y0)
    fy0 = max(0, int(math.floor((geo["face_cy"] - p["face_ry"] * 0.75) * H)))
    b["forehead"] = Box(min(fy0, eye_top - 1), b["left_eye"].x0, eye_top, b["right_eye"].x1)
    face_x0 = int(math.ceil((geo["face_cx"] - p["face_rx"] * 0.85) * W))
    face_x1 = int(math.floor((geo["face_cx"] + p["face_rx"] * 0.85) * W))
    cheek_bot = b["mouth"].y0
    b["left_cheek"] = Box(eye_bot, face_x0, cheek_bot, b["nose"].x0)
    b["right_cheek"] = Box(eye_bot, b["nose"].x1, cheek_bot, face_x1)
    chin_bot = int(math.floor((geo["face_cy"] + p["face_ry"] * 0.92) * H))
    b["chin"] = Box(b["mouth"].y1, b["mouth"].x0, max(chin_bot, b["mouth"].y1 + 1), b["mouth"].x1)
    landmarks = LandmarkMap(b)
    try:
        landmarks.validate(H, W)
    except LandmarkError as exc:
        raise LandmarkError(f"identity {identity.id} seed {variation_seed}: {exc}") from exc

    # rasterize at sub-pixel resolution then box-filter down
    s = _SUPERSAMPLE
    yy = (np.arange(H * s) + 0.5) / (H * s)
    xx = (np.arange(W * s) + 0.5) / (W * s)
    yy, xx = np.meshgrid(yy, xx, indexing="ij")
    img = np.full((H * s, W * s), inten["background"])
    face = _ellipse(yy, xx, geo["face_cy"], geo["face_cx"], p["face_ry"], p["face_rx"])
    shade = inten["skin"] + p["shade_x"] * (xx - geo["face_cx"]) * 2 + p["shade_y"] * (yy - geo["face_cy"]) * 2
    img = np.where(face, shade, img)
    img = np.where(face & (yy < geo["hairline"]), inten["hair"], img)
    for cx in (le_cx, re_cx):
        img = np.where(_ellipse(yy, xx, ey, cx, ery, erx), inten["eye"], img)
    # nose: triangle with apex at top
    frac = (yy - n_top) / (n_bot - n_top)
    nose = (frac >= 0) & (frac <= 1) & (np.abs(xx - n_cx) <= n_hw * frac)
    img = np.where(nose, inten["skin"] - inten["nose"], img)
    mouth = (np.abs(yy - m_y) <= m_hh) & (np.abs(xx - m_cx) <= m_hw)
    img = np.where(mouth, inten["mouth"], img)
    img = img.reshape(H, s, W, s).mean(axis=(1, 3))
    if C == 1:
        out = img[:, :, None]
    else:
        tint = 1.0 + 0.15 * np.sin(np.arange(C) * 2.1 + identity.id)
        out = img[:, :, None] * tint[None, None, :]
    return np.clip(out, 0.0, 1.0), landmarks


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class FaceDataset:
    images: np.ndarray                  # (N, H, W, C) in [0, 1]
    identities: np.ndarray              # (N,) int
    landmarks: list
    splits: list                        # "train" / "hold"
    filenames: list
    split_mode: str = "image_level"
    identity_params: dict = field(default_factory=dict)  # id -> FaceIdentity (synthetic only)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.splits)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=int)

    def split_images(self, split: str) -> np.ndarray:
        return self.images[self.indices(split)]

    def identities_in(self, split: str) -> list[int]:
        return sorted({int(self.identities[i]) for i in self.indices(split)})

    def images_of(self, identity_id: int, split: str | None = None) -> np.ndarray:
        return np.array([i for i in range(len(self)) if self.identities[i] == identity_id
                         and (split is None or self.splits[i] == split)], dtype=int)


def _split_counts(n: int, fraction: float) -> int:
    k = int(round(n * fraction))
    return min(max(k, 1), n - 1) if n > 1 else n


def generate_dataset(n_identities: int, images_per_identity: int, shape=(32, 32, 1),
                     split_fraction: float = 0.6, split_mode: str = "image_level",
                     seed: int = 0, jitter: float = 0.05) -> FaceDataset:
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    if n_identities < 1 or images_per_identity < 1:
        raise ValueError("counts must be >= 1")
    if split_mode not in SPLIT_MODES:
        raise ValueError(f"split_mode must be one of {SPLIT_MODES}")
    rng = np.random.default_rng([seed, 0])
    idents = {}
    images, ids, lms, names = [], [], [], []
    for i in range(n_identities):
        ident = FaceIdentity.sample(i, rng)
        idents[i] = ident
        for j in range(images_per_identity):
            img, lm = render_identity(ident, variation_seed=int(seed) * 100003 + j, jitter=jitter,
                                      shape=shape)
            images.append(img)
            ids.append(i)
            lms.append(lm)
            names.append(f"id{i:04d}_{j:03d}")
    n = len(images)
    split_rng = np.random.default_rng([seed, 1])
    if split_mode == "image_level":
        train_idx = set(split_rng.permutation(n)[:_split_counts(n, split_fraction)].tolist())
        splits = ["train" if k in train_idx else "hold" for k in range(n)]
    else:
        chosen = split_rng.permutation(n_identities)[:_split_counts(n_identities, split_fraction)]
        train_ids = set(int(v) for v in chosen)
        splits = ["train" if ids[k] in train_ids else "hold" for k in range(n)]
    meta = {"n_identities": n_identities, "images_per_identity": images_per_identity,
            "shape": list(shape), "split_fraction": split_fraction, "seed": seed, "jitter": jitter}
    return FaceDataset(np.stack(images), np.array(ids), lms, splits, names, split_mode, idents, meta)


def fresh_identities(n: int, seed: int, start_id: int = 100000) -> list[FaceIdentity]:
    """Identities from parameter draws never used by ``generate_dataset``."""
    rng = np.random.default_rng([seed, 0xF2E5])
    return [FaceIdentity.sample(start_id + k, rng) for k in range(n)]


def render_queries(identity: FaceIdentity, n: int, seed: int, jitter: float = 0.05,
                   shape=(32, 32, 1)):
    """``n`` extra renders with variation seeds disjoint from the dataset's."""
    out = [render_identity(identity, variation_seed=(1 << 40) + int(seed) * 1009 + k,
                           jitter=jitter, shape=shape) for k in range(n)]
    return np.stack([o[0] for o in out]), [o[1] for o in out]


# ---------------------------------------------------------------------------
# PNM and directory I/O
# ---------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\s+)|(\S+)")


def read_pnm(path) -> np.ndarray:
    """Decode P2/P3/P5/P6 into a float array ``(H, W, C)`` scaled to [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _PNM_TOKEN.match(data, pos)
        if m is None:
            raise DataError(f"{path.name}: truncated PNM header")
        pos = m.end()
        if m.group(3):
            tokens.append(m.group(3))
    magic = tokens[0]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{path.name}: unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(v) for v in tokens[1:4])
    except ValueError as exc:
        raise DataError(f"{path.name}: bad PNM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise DataError(f"{path.name}: bad PNM dimensions or maxval")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        raw = data[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        if len(raw) < count * dtype.itemsize:
            raise DataError(f"{path.name}: truncated pixel data")
        arr = np.frombuffer(raw[:count * dtype.itemsize], dtype=dtype)
    else:
        vals = data[pos:].split()
        if len(vals) < count:
            raise DataError(f"{path.name}: truncated pixel data")
        arr = np.array([int(v) for v in vals[:count]])
    arr = arr.astype(np.float64).reshape(height, width, channels) / maxval
    return np.clip(arr, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    """Write binary P5 (one channel) or P6 (three channels), clamping to [0, 1]."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PNM")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(to_uint8(img).tobytes())


def save_dataset(ds: FaceDataset, directory) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if ds.shape[2] == 1 else ".ppm"
    landmarks = {}
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "identity_id", "split"])
        for k in range(len(ds)):
            fname = ds.filenames[k] + ext
            write_pnm(directory / "images" / fname, ds.images[k])
            w.writerow([fname, int(ds.identities[k]), ds.splits[k]])
            landmarks[fname] = ds.landmarks[k].to_json()
    (directory / "landmarks.json").write_text(json.dumps(landmarks, indent=1, sort_keys=True))
    manifest = {"split_mode": ds.split_mode, "meta": ds.meta,
                "identities": {str(k): v.params for k, v in sorted(ds.identity_params.items())}}
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def _load_landmarks(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read landmark file {path}: {exc}") from exc


def load_dataset(directory) -> FaceDataset:
    """Inverse of :func:`save_dataset`."""
    directory = Path(directory)
    labels = directory / "labels.csv"
    if not labels.is_file():
        raise DataError(f"missing {labels}")
    with open(labels, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{labels} lists no images")
    sidecar = _load_landmarks(directory / "landmarks.json")
    images, ids, lms, splits, names = [], [], [], [], []
    for row in rows:
        try:
            fname, ident, split = row["filename"], int(row["identity_id"]), row["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{labels}: malformed row {row}") from exc
        if split not in SPLITS:
            raise DataError(f"{labels}: {fname} has unknown split {split!r}")
        img = read_pnm(directory / "images" / fname)
        if fname not in sidecar:
            raise LandmarkError(f"no landmarks for {fname}")
        lm = LandmarkMap.from_json(sidecar[fname]).validate(img.shape[0], img.shape[1], disjoint=False)
        images.append(img)
        ids.append(ident)
        lms.append(lm)
        splits.append(split)
        names.append(Path(fname).stem)
    if len({im.shape for im in images}) != 1:
        raise DataError(f"{directory}: images differ in shape")
    mode, meta, idents = "image_level", {}, {}
    manifest = directory / "dataset.json"
    if manifest.is_file():
        info = json.loads(manifest.read_text())
        mode, meta = info.get("split_mode", mode), info.get("meta", {})
        idents = {int(k): FaceIdentity(int(k), v) for k, v in info.get("identities", {}).items()}
    return FaceDataset(np.stack(images), np.array(ids), lms, splits, names, mode, idents, meta)


def load_external_images(directory, landmark_sidecar, labels=None) -> FaceDataset:
    """Read every .pgm/.ppm in ``directory`` with caller-supplied landmarks.

    Without a labels CSV each image is its own identity in the holdout split.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise DataError(f"no .pgm/.ppm images in {directory}")
    sidecar = _load_landmarks(Path(landmark_sidecar))
    label_rows = {}
    if labels is not None:
        with open(labels, newline="") as fh:
            label_rows = {r["filename"]: r for r in csv.DictReader(fh)}
    images, ids, lms, splits = [], [], [], []
    for k, f in enumerate(files):
        if f.name not in sidecar:
            raise LandmarkError(f"no landmarks for {f.name}")
        img = read_pnm(f)
        try:
            lm = LandmarkMap.from_json(sidecar[f.name]).validate(img.shape[0], img.shape[1], disjoint=False)
        except LandmarkError as exc:
            raise LandmarkError(f"{f.name}: {exc}") from exc
        row = label_rows.get(f.name)
        images.append(img)
        ids.append(int(row["identity_id"]) if row else k)
        splits.append(row["split"] if row else "hold")
        lms.append(lm)
    if len({im.shape for im in images}) != 1:
        raise DataError(f"{directory}: images differ in shape")
    return FaceDataset(np.stack(images), np.array(ids), lms, splits, [f.stem for f in files],
                       "image_level", {}, {"source": str(directory)})


def identity_to_json(ident: FaceIdentity) -> dict:
    return asdict(ident)

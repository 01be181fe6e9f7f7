"""Binary facial masks: occluding suites (MIA/IIA) and preserving suites (extraction)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .faces import CANONICAL_FEATURES, LandmarkMap, write_pnm

# single-region occlusions, then grouped ones; names refer to LandmarkMap boxes
SINGLE_REGIONS = (
    ("eyes", ("left_eye", "right_eye")),
    ("nose", ("nose",)),
    ("mouth", ("mouth",)),
    ("forehead", ("forehead",)),
    ("cheeks", ("left_cheek", "right_cheek")),
    ("chin", ("chin",)),
)
GROUPED_REGIONS = (
    ("eyes+nose", ("left_eye", "right_eye", "nose")),
    ("nose+mouth", ("nose", "mouth")),
)


@dataclass(frozen=True, eq=False)
class PixelMask:
    bits: np.ndarray = field(repr=False)  # (H, W) uint8, 1 = visible
    label: str = ""
    regions: tuple = ()
    visible_count: int = field(init=False)

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2 or not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be a 2-D array of zeros and ones")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "visible_count", int(bits.sum()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @classmethod
    def identity(cls, height: int, width: int) -> "PixelMask":
        return cls(np.ones((height, width), dtype=np.uint8), "identity")

    def manifest(self) -> dict:
        return {"label": self.label, "regions": list(self.regions),
                "visible_count": self.visible_count}


@dataclass(frozen=True)
class MaskSuite:
    masks: tuple
    kind: str  # "occluding" | "preserving"
    seed: int

    def __post_init__(self):
        if not self.masks:
            raise ValueError("mask suite needs at least one mask")
        if len({m.shape for m in self.masks}) != 1:
            raise ValueError("all masks in a suite must share one shape")
        if self.kind not in ("occluding", "preserving"):
            raise ValueError(f"unknown suite kind {self.kind!r}")

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def manifest(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "masks": [m.manifest() for m in self.masks]}


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, PixelMask) else np.asarray(mask)


def apply_mask(x: np.ndarray, mask) -> np.ndarray:
    """``x * M``, broadcasting the (H, W) mask over channels and any batch axis."""
    x = np.asarray(x, dtype=np.float64)
    bits = _bits(mask)
    if x.ndim < 3 or x.shape[-3:-1] != bits.shape:
        raise ValueError(f"mask shape {bits.shape} does not match image shape {x.shape}")
    return x * bits[:, :, None]


def _region_mask(shape, landmarks: LandmarkMap, names, visible_inside: bool) -> np.ndarray:
    H, W = shape[:2]
    inside = np.zeros((H, W), dtype=np.uint8)
    for name in names:
        inside[landmarks[name].slices()] = 1
    return inside if visible_inside else 1 - inside


def occluding_mask(shape, landmarks: LandmarkMap, names, label: str) -> PixelMask:
    return PixelMask(_region_mask(shape, landmarks, names, False), f"occlude:{label}", tuple(names))


def preserving_mask(shape, landmarks: LandmarkMap, names) -> PixelMask:
    return PixelMask(_region_mask(shape, landmarks, names, True),
                     "preserve:" + "+".join(names), tuple(names))


def build_occluding_suite(landmarks: LandmarkMap, shape, n_random_patches: int = 3,
                          patch_size: int = 8, seed: int = 0) -> MaskSuite:
    H, W = int(shape[0]), int(shape[1])
    landmarks.validate(H, W, disjoint=False)
    if patch_size < 1 or patch_size > min(H, W):
        raise ValueError(f"patch size {patch_size} does not fit a {H}x{W} frame")
    if patch_size == H and patch_size == W and n_random_patches:
        raise ValueError("patch would occlude the entire frame")
    masks = [occluding_mask((H, W), landmarks, names, label)
             for label, names in SINGLE_REGIONS + GROUPED_REGIONS]
    rng = np.random.default_rng([seed, 0x0CC])
    for k in range(n_random_patches):
        y = int(rng.integers(0, H - patch_size + 1))
        x = int(rng.integers(0, W - patch_size + 1))
        bits = np.ones((H, W), dtype=np.uint8)
        bits[y:y + patch_size, x:x + patch_size] = 0
        masks.append(PixelMask(bits, f"occlude:patch{k}@{y},{x}"))
    return MaskSuite(tuple(masks), "occluding", seed)


def feature_subsets() -> list[tuple[str, ...]]:
    """All non-empty subsets of the four canonical features, in a fixed order."""
    out = []
    n = len(CANONICAL_FEATURES)
    for code in range(1, 1 << n):
        out.append(tuple(CANONICAL_FEATURES[i] for i in range(n) if code >> i & 1))
    return out


def build_preserving_suite(landmarks: LandmarkMap, shape, n_masks: int = 10,
                           seed: int = 0) -> MaskSuite:
    if n_masks < 1:
        raise ValueError("n_masks must be >= 1")
    H, W = int(shape[0]), int(shape[1])
    subsets = feature_subsets()
    rng = np.random.default_rng([seed, 0x9E5])
    masks, prev = [], None
    for _ in range(n_masks):
        choice = int(rng.integers(len(subsets)))
        if choice == prev:
            # redraw among the others so consecutive masks differ
            choice = (choice + 1 + int(rng.integers(len(subsets) - 1))) % len(subsets)
        prev = choice
        masks.append(preserving_mask((H, W), landmarks, subsets[choice]))
    return MaskSuite(tuple(masks), "preserving", seed)


def export_suite(suite: MaskSuite, directory) -> Path:
    """Write each mask as a 0/255 PGM plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, m in enumerate(suite.masks):
        fname = f"mask_{i:03d}.pgm"
        write_pnm(directory / fname, m.bits.astype(np.float64))
        entries.append({"file": fname, **m.manifest()})
    manifest = {"kind": suite.kind, "seed": suite.seed, "masks": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory

"""Membership, identity and extraction attacks driven by reconstruction losses.

Randomness for a query is keyed on ``(seed, digest of the query pixels)``, so a
score never depends on where the query sits in a list, on mask order, or on
how work is split across threads.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, SamplerConfig, forward_noise, predict_x0, reverse_step
from .faces import CANONICAL_FEATURES, LandmarkMap
from .occlusion import MaskSuite, apply_mask, build_occluding_suite

MIA_THRESHOLD = 0.6
IIA_THRESHOLD = 0.5


class AttackError(ValueError):
    """Attack called with inputs it cannot use."""


# ---------------------------------------------------------------------------
# Trajectory statistics
# ---------------------------------------------------------------------------


@dataclass
class LossTrajectory:
    label: str
    timesteps: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.errors = np.asarray(self.errors, dtype=np.float64)
        if self.errors.ndim != 1 or len(self.errors) < 2:
            raise AttackError("a loss trajectory needs at least 2 entries")
        if len(self.timesteps) != len(self.errors):
            raise AttackError("timesteps and errors differ in length")
        if not np.all(np.isfinite(self.errors)) or np.any(self.errors < 0):
            raise AttackError("trajectory errors must be finite and non-negative")


@dataclass
class MaskStats:
    mean: float
    std: float
    cv: float
    skewness: float
    mean_rate_of_change: float
    degenerate: bool = False

    @property
    def variability(self) -> float:
        """Per-mask term of the confidence score: CV + |S| + mean |dE|."""
        return self.cv + abs(self.skewness) + self.mean_rate_of_change


def trajectory_stats(traj) -> MaskStats:
    """CV, skewness and mean absolute step change of one error sequence.

    Population moments; skewness is 0 when the sequence is constant.  An
    all-zero sequence is flagged ``degenerate`` and reported as zeros.
    """
    e = traj.errors if isinstance(traj, LossTrajectory) else LossTrajectory("", np.arange(len(traj)), traj).errors
    n = len(e)
    mu = math.fsum(e) / n
    if mu == 0.0:
        return MaskStats(0.0, 0.0, 0.0, 0.0, 0.0, degenerate=True)
    dev = e - mu
    sigma = math.sqrt(math.fsum(dev * dev) / n)
    skew = math.fsum((dev / sigma) ** 3) / n if sigma > 0 else 0.0
    roc = math.fsum(np.abs(np.diff(e))) / (n - 1)
    return MaskStats(mu, sigma, sigma / mu, skew, roc)


def mia_confidence(stats) -> float:
    """1 / (1 + mean over masks of (CV + |S| + dE))."""
    terms = sorted(s.variability for s in stats)
    if not terms:
        raise AttackError("no mask statistics")
    return 1.0 / (1.0 + math.fsum(terms) / len(terms))


def identity_score(mean_error: float, std_error: float) -> float:
    return math.exp(-(std_error + mean_error))


# ---------------------------------------------------------------------------
# Shared sampling machinery
# ---------------------------------------------------------------------------


def query_digest(x: np.ndarray) -> int:
    h = hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).digest()
    return int.from_bytes(h[:8], "little")


def _mask_digest(bits: np.ndarray) -> int:
    return int.from_bytes(hashlib.sha256(np.ascontiguousarray(bits, dtype=np.uint8).tobytes()).digest()[:8],
                          "little")


def _rows_reverse(x0_rows: np.ndarray, eps: np.ndarray, rngs, model: Denoiser,
                  sched: NoiseSchedule, config: SamplerConfig):
    """Noise each row to ``t_start`` then denoise the batch.

    Returns (timesteps, estimates[n_rec, B, ...], final) where estimates are
    the recorded one-step x0 predictions.  Row ``i`` of ancestral noise comes
    from ``rngs[i]``, so rows are independent of batch composition.
    """
    config.validate(sched)
    x = forward_noise(x0_rows, config.t_start, eps, sched)
    ts, recs = [], []
    for t in range(config.t_start, 0, -1):
        eps_hat = model.predict_noise(x, t)
        if (t - 1) % config.record_every == 0:
            ts.append(t)
            recs.append(predict_x0(x, t, model, sched, eps_hat))
        if config.kind == "ancestral" and t > 1:
            z = np.stack([g.standard_normal(x.shape[1:]) for g in rngs])
            x = reverse_step(x, t, model, sched, config, rng=_Fixed(z), eps_hat=eps_hat)
        else:
            x = reverse_step(x, t, model, sched, config, eps_hat=eps_hat)
    return np.array(ts), np.stack(recs), x


class _Fixed:
    """Generator stand-in that hands back pre-drawn noise."""

    def __init__(self, z):
        self.z = z

    def standard_normal(self, shape):
        assert shape == self.z.shape
        return self.z


def _query_rng(seed: int, x: np.ndarray, *extra) -> np.random.Generator:
    return np.random.default_rng([int(seed), query_digest(x), *extra])


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------


@dataclass
class MiaResult:
    confidence: float
    member: bool
    threshold: float
    mask_labels: list
    stats: list
    trajectories: list = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"confidence": self.confidence, "member": self.member, "threshold": self.threshold,
                "masks": [{"label": lbl, **asdict(s)} for lbl, s in zip(self.mask_labels, self.stats)]}


def masked_errors(xq: np.ndarray, estimates: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """E(t) = ||(x_q - x_hat(t)) * M||_2 / N over the recorded estimates."""
    diff = (estimates - xq) * bits[:, :, None]
    return np.sqrt(np.sum(diff * diff, axis=(1, 2, 3))) / float(bits.sum())


def mia_attack(xq: np.ndarray, landmarks: LandmarkMap | None, model: Denoiser, sched: NoiseSchedule,
               suite: MaskSuite | None, config: SamplerConfig, threshold: float = MIA_THRESHOLD,
               keep_trajectories: bool = False) -> MiaResult:
    """Score one image; higher confidence means more likely a training member.

    Every mask shares one forward-noise draw keyed on the query; ancestral
    noise is keyed on the query and the mask bits.
    """
    if not 0.0 < threshold < 1.0:
        raise AttackError("threshold must lie in (0, 1)")
    xq = np.asarray(xq, dtype=np.float64)
    if suite is None:
        if landmarks is None:
            raise AttackError("need landmarks or a mask suite")
        suite = build_occluding_suite(landmarks, xq.shape)
    if suite.kind != "occluding":
        raise AttackError(f"membership inference needs an occluding suite, got {suite.kind}")
    rng = _query_rng(config.rng_seed, xq)
    eps = rng.standard_normal(xq.shape)
    rows = np.stack([apply_mask(xq, m) for m in suite.masks])
    rngs = [_query_rng(config.rng_seed, xq, _mask_digest(m.bits)) for m in suite.masks]
    ts, recs, _ = _rows_reverse(rows, np.broadcast_to(eps, rows.shape), rngs, model, sched, config)
    stats, trajs = [], []
    for i, m in enumerate(suite.masks):
        traj = LossTrajectory(m.label, ts, masked_errors(xq, recs[:, i], m.bits))
        stats.append(trajectory_stats(traj))
        trajs.append(traj)
    conf = mia_confidence(stats)
    return MiaResult(conf, conf >= threshold, threshold, [m.label for m in suite.masks], stats,
                     trajs if keep_trajectories else [])


# ---------------------------------------------------------------------------
# Identity inference
# ---------------------------------------------------------------------------


@dataclass
class IiaResult:
    score: float
    member: bool
    threshold: float
    mean_error: float
    std_error: float
    per_query: list  # (mu_k, sigma_k, mask label)

    def to_json(self) -> dict:
        return {"score": self.score, "member": self.member, "threshold": self.threshold,
                "mean_error": self.mean_error, "std_error": self.std_error,
                "queries": [{"mean": m, "std": s, "mask": lbl} for m, s, lbl in self.per_query]}


def iia_query_errors(queries, landmarks, model: Denoiser, sched: NoiseSchedule, config: SamplerConfig,
                     suite: MaskSuite | None = None) -> list:
    """(mu_k, sigma_k, mask label) for each query, reconstructed in one batch.

    Each query gets one occluding mask drawn from its own suite (or ``suite``)
    by a generator keyed on the query pixels; errors are RMS distances between
    the unmasked query and each recorded x0 estimate.
    """
    queries = [np.asarray(q, dtype=np.float64) for q in queries]
    if not queries:
        raise AttackError("identity inference needs at least one query image")
    if isinstance(landmarks, LandmarkMap) or landmarks is None:
        landmarks = [landmarks] * len(queries)
    if len(landmarks) != len(queries):
        raise AttackError("one landmark map per query is required")
    rows, eps, rngs, labels = [], [], [], []
    for q, lm in zip(queries, landmarks):
        if suite is None and lm is None:
            raise AttackError("need landmarks or a mask suite")
        s = suite if suite is not None else build_occluding_suite(lm, q.shape)
        if s.kind != "occluding":
            raise AttackError("identity inference needs occluding masks")
        rng = _query_rng(config.rng_seed, q, 0x11A)
        mask = s.masks[int(rng.integers(len(s)))]
        rows.append(apply_mask(q, mask))
        eps.append(rng.standard_normal(q.shape))
        rngs.append(rng)
        labels.append(mask.label)
    _, recs, _ = _rows_reverse(np.stack(rows), np.stack(eps), rngs, model, sched, config)
    diff = recs - np.stack(queries)[None]
    err = np.sqrt(np.mean(diff * diff, axis=(2, 3, 4)))  # (n_rec, K)
    out = []
    for k in range(len(queries)):
        e = err[:, k]
        mu = math.fsum(e) / len(e)
        sd = math.sqrt(math.fsum((e - mu) ** 2) / len(e))
        out.append((mu, sd, labels[k]))
    return out


def iia_from_errors(per_query, threshold: float = IIA_THRESHOLD) -> IiaResult:
    if not per_query:
        raise AttackError("identity inference needs at least one query image")
    mu_all = math.fsum(sorted(p[0] for p in per_query)) / len(per_query)
    sd_all = math.fsum(sorted(p[1] for p in per_query)) / len(per_query)
    score = identity_score(mu_all, sd_all)
    return IiaResult(score, score >= threshold, threshold, mu_all, sd_all, list(per_query))


def iia_attack(queries, landmarks, model: Denoiser, sched: NoiseSchedule, config: SamplerConfig,
               suite: MaskSuite | None = None, threshold: float = IIA_THRESHOLD) -> IiaResult:
    """S_II = exp(-(sigma_E + mu_E)) over K queries of one identity."""
    if not 0.0 < threshold < 1.0:
        raise AttackError("threshold must lie in (0, 1)")
    return iia_from_errors(iia_query_errors(queries, landmarks, model, sched, config, suite), threshold)


# ---------------------------------------------------------------------------
# k-means and extraction
# ---------------------------------------------------------------------------


@dataclass
class ClusterResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    inertia_history: list
    n_iter: int
    converged: bool
    representatives: list = field(default_factory=list)   # sample index per cluster
    images: np.ndarray | None = None                       # representative images

    @property
    def K(self) -> int:
        return len(self.centroids)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def kmeans_objective(X: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    d = X - centroids[assignments]
    return math.fsum(np.einsum("ij,ij->i", d, d))


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.uniform(0, total), side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return X[centers].copy()


def kmeans(features, K: int, max_iters: int = 100, seed: int = 0) -> ClusterResult:
    """Lloyd iterations from k-means++ seeds; stops when assignments repeat.

    Ties go to the lowest cluster index.  An empty cluster takes the point
    farthest from its current centroid.
    """
    try:
        X = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise AttackError("feature vectors differ in dimension") from exc
    if X.ndim != 2:
        raise AttackError("features must form an (n, d) array of equal-length vectors")
    n = len(X)
    if not 1 <= K <= n:
        raise AttackError(f"K={K} must lie in [1, {n}]")
    rng = np.random.default_rng([int(seed), 0x6B6D])
    centroids = kmeans_pp_init(X, K, rng)
    assign = np.argmin(_sq_dists(X, centroids), axis=1)
    history, it, converged = [], 0, False
    while True:
        counts = np.bincount(assign, minlength=K)
        for k in np.flatnonzero(counts == 0):
            d = np.einsum("ij,ij->i", X - centroids[assign], X - centroids[assign])
            d[counts[assign] <= 1] = -1.0
            far = int(np.argmax(d))
            counts[assign[far]] -= 1
            assign[far] = k
            counts[k] += 1
        centroids = np.stack([X[assign == k].mean(axis=0) for k in range(K)])
        history.append(kmeans_objective(X, centroids, assign))
        it += 1
        if it >= max_iters:
            break
        new = np.argmin(_sq_dists(X, centroids), axis=1)
        if np.array_equal(new, assign):
            converged = True
            break
        assign = new
    return ClusterResult(centroids, assign, history[-1], history, it, converged)


def feature_region(landmarks: LandmarkMap, shape) -> np.ndarray:
    """Boolean (H, W) union of the four canonical feature boxes."""
    region = np.zeros(shape[:2], dtype=bool)
    for name in CANONICAL_FEATURES:
        region[landmarks[name].slices()] = True
    return region


def extraction_samples(xq: np.ndarray, suite: MaskSuite, model: Denoiser, sched: NoiseSchedule,
                       n_samples: int, config: SamplerConfig) -> np.ndarray:
    """``n_samples`` final reconstructions, mask ``j % len(suite)`` and seed ``j`` for sample j."""
    xq = np.asarray(xq, dtype=np.float64)
    rows = np.stack([apply_mask(xq, suite.masks[j % len(suite)]) for j in range(n_samples)])
    rngs = [np.random.default_rng([int(config.rng_seed), query_digest(xq), 0xDEA, j])
            for j in range(n_samples)]
    eps = np.stack([g.standard_normal(xq.shape) for g in rngs])
    _, _, final = _rows_reverse(rows, eps, rngs, model, sched, config)
    return final


def extraction_attack(xq: np.ndarray, landmarks: LandmarkMap, model: Denoiser, sched: NoiseSchedule,
                      suite: MaskSuite, n_samples: int = 100, K: int = 10,
                      config: SamplerConfig | None = None, max_iters: int = 100) -> ClusterResult:
    """Generate candidates from preserving masks, cluster them, pick one per cluster."""
    if suite.kind != "preserving":
        raise AttackError(f"extraction needs a preserving suite, got {suite.kind}")
    if n_samples < K:
        raise AttackError("n_samples must be >= K")
    config = config or SamplerConfig("ancestral", sched.T // 2, 1, 0)
    samples = extraction_samples(xq, suite, model, sched, n_samples, config)
    region = feature_region(landmarks, samples.shape[1:])
    feats = samples[:, region, :].reshape(n_samples, -1)
    res = kmeans(feats, K, max_iters=max_iters, seed=config.rng_seed)
    d = _sq_dists(feats, res.centroids)
    reps = []
    for k in range(K):
        members = np.flatnonzero(res.assignments == k)
        reps.append(int(members[np.argmin(d[members, k])]))
    res.representatives = reps
    res.images = samples[reps]
    return res

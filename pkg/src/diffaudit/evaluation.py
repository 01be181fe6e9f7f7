"""Experiment harness: query sampling, metrics, and t_start sweeps.

Each runner scores every distinct query once (scores are keyed on the query
pixels, so a query drawn in several runs gets the same score) and then
aggregates per run.  Work is fanned out over ``workers`` threads; the result
does not depend on the worker count.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attacks import (IIA_THRESHOLD, MIA_THRESHOLD, _map, extraction_attack, iia_from_errors,
                      iia_query_errors, mia_attack, query_digest)
from .diffusion import Denoiser, NoiseSchedule, SamplerConfig
from .faces import FaceDataset, FaceIdentity, fresh_identities, render_identity, render_queries
from .occlusion import build_preserving_suite

METRICS = ("accuracy", "precision", "recall", "auc_roc")
IIA_QUERY_COUNTS = (1, 3, 5, 8, 10)


class EvaluationError(ValueError):
    """Not enough data, or a single-class score set."""


@dataclass(frozen=True)
class LabeledScore:
    score: float
    member: bool
    subject: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise EvaluationError(f"score {self.score!r} outside [0, 1]")


def _split(scores):
    s = np.array([x.score for x in scores], dtype=np.float64)
    m = np.array([bool(x.member) for x in scores])
    return s, m


def auc_roc(scores) -> float:
    """P(member score > non-member score), ties counted half, via ranks."""
    s, m = _split(scores)
    n1, n0 = int(m.sum()), int((~m).sum())
    if n1 == 0 or n0 == 0:
        raise EvaluationError("AUC needs at least one member and one non-member")
    ranks = rankdata(s)  # average ranks for ties
    u = math.fsum(ranks[m]) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def confusion(scores, threshold: float) -> tuple[int, int, int, int]:
    s, m = _split(scores)
    pred = s >= threshold
    return (int(np.sum(pred & m)), int(np.sum(pred & ~m)),
            int(np.sum(~pred & ~m)), int(np.sum(~pred & m)))


def classification_metrics(scores, threshold: float) -> dict:
    """accuracy / precision / recall at ``threshold`` (precision 0 with no positives), plus AUC."""
    scores = list(scores)
    if not scores:
        raise EvaluationError("no scores")
    if not 0.0 < threshold < 1.0:
        raise EvaluationError("threshold must lie in (0, 1)")
    tp, fp, tn, fn = confusion(scores, threshold)
    out = {
        "accuracy": (tp + tn) / len(scores),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
    }
    try:
        out["auc_roc"] = auc_roc(scores)
    except EvaluationError:
        out["auc_roc"] = float("nan")
    return out


@dataclass
class MetricsReport:
    threshold: float
    n_runs: int
    runs: list                      # one metrics dict per run
    mean: dict
    config: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)   # per run: list of LabeledScore

    @classmethod
    def from_runs(cls, run_scores, threshold: float, config: dict | None = None) -> "MetricsReport":
        runs = [classification_metrics(sc, threshold) for sc in run_scores]
        mean = {k: math.fsum(r[k] for r in runs) / len(runs) for k in METRICS}
        return cls(threshold, len(runs), runs, mean, dict(config or {}), [list(sc) for sc in run_scores])

    def csv_rows(self):
        rows = []
        for i, r in enumerate(self.runs):
            rows += [(k, str(i), r[k]) for k in METRICS]
        rows += [(k, "mean", self.mean[k]) for k in METRICS]
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "run", "value"])
            for k, run, v in self.csv_rows():
                w.writerow([k, run, repr(float(v))])

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold, "n_runs": self.n_runs, "runs": self.runs, "mean": self.mean,
            "config": self.config,
            "scores": [[asdict(s) for s in run] for run in self.scores],
        }


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------


def _sampler_json(config: SamplerConfig) -> dict:
    return asdict(config)


def run_mia_experiment(dataset: FaceDataset, model: Denoiser, sched: NoiseSchedule, config: SamplerConfig,
                       n_queries: int = 20, n_runs: int = 7, seed: int = 0,
                       threshold: float = MIA_THRESHOLD, workers: int = 1) -> MetricsReport:
    """Per run: n/2 random train images vs n/2 random holdout images."""
    if n_queries < 2 or n_queries % 2:
        raise EvaluationError("n_queries must be an even number >= 2")
    half = n_queries // 2
    train, hold = dataset.indices("train"), dataset.indices("hold")
    if len(train) < half or len(hold) < half:
        raise EvaluationError(f"need {half} images per split, have {len(train)} train / {len(hold)} hold")
    picks = []
    for r in range(n_runs):
        rng = np.random.default_rng([int(seed), r, 0x313A])
        picks.append((rng.choice(train, half, replace=False), rng.choice(hold, half, replace=False)))
    unique = sorted({int(i) for tr, ho in picks for i in (*tr, *ho)})
    conf = dict(zip(unique, _map(
        lambda i: mia_attack(dataset.images[i], dataset.landmarks[i], model, sched, None, config,
                             threshold).confidence, unique, workers)))
    run_scores = []
    for tr, ho in picks:
        run_scores.append([LabeledScore(conf[int(i)], True, dataset.filenames[i]) for i in tr]
                          + [LabeledScore(conf[int(i)], False, dataset.filenames[i]) for i in ho])
    cfg = {"experiment": "mia", "n_queries": n_queries, "n_runs": n_runs, "attack_seed": seed,
           "threshold": threshold, "sampler": _sampler_json(config)}
    return MetricsReport.from_runs(run_scores, threshold, cfg)


# ---------------------------------------------------------------------------
# Identity inference
# ---------------------------------------------------------------------------


def _identity_pool(dataset: FaceDataset, ident: int, n: int, seed: int, params: FaceIdentity | None):
    """Dataset images of ``ident`` first, then fresh renders up to ``n``."""
    idx = [int(i) for i in np.flatnonzero(dataset.identities == ident)]
    imgs = [dataset.images[i] for i in idx][:n]
    lms = [dataset.landmarks[i] for i in idx][:n]
    if len(imgs) < n:
        if params is None:
            raise EvaluationError(f"identity {ident} has {len(imgs)} images, {n} queries requested")
        jitter = float(dataset.meta.get("jitter", 0.05))
        extra, extra_lms = render_queries(params, n - len(imgs), seed, jitter, dataset.shape)
        imgs += list(extra)
        lms += extra_lms
    return imgs, lms


def run_iia_experiment(dataset: FaceDataset, model: Denoiser, sched: NoiseSchedule, config: SamplerConfig,
                       query_counts=IIA_QUERY_COUNTS, n_runs: int = 7, seed: int = 0,
                       n_identities: int = 5, threshold: float = IIA_THRESHOLD,
                       workers: int = 1) -> dict:
    """Identity inference over member identities vs freshly synthesized ones.

    Per run, ``n_identities`` member identities are drawn from the train split
    and ``n_identities`` never-rendered identities act as non-members.  Each
    identity's query list is a run-specific shuffle of a fixed pool (its
    dataset images, then extra renders); K queries are the first K of it.
    Returns ``{K: MetricsReport}``.
    """
    query_counts = sorted({int(k) for k in query_counts})
    if not query_counts or query_counts[0] < 1:
        raise EvaluationError("query counts must be >= 1")
    if dataset.split_mode != "identity_disjoint":
        raise EvaluationError("identity inference needs an identity_disjoint dataset")
    members = dataset.identities_in("train")
    if len(members) < n_identities:
        raise EvaluationError(f"need {n_identities} member identities, have {len(members)}")
    kmax = query_counts[-1]
    params = dataset.identity_params
    fresh = fresh_identities(n_runs * n_identities, seed)

    plan = []  # per run: list of (subject, is_member, [query images], [landmarks])
    for r in range(n_runs):
        rng = np.random.default_rng([int(seed), r, 0x11A])
        chosen = rng.choice(members, n_identities, replace=False)
        entries = []
        for ident in chosen:
            imgs, lms = _identity_pool(dataset, int(ident), kmax, seed, params.get(int(ident)))
            entries.append((f"id{int(ident)}", True, imgs, lms))
        for ident in fresh[r * n_identities:(r + 1) * n_identities]:
            imgs, lms = render_queries(ident, kmax, seed, float(dataset.meta.get("jitter", 0.05)), dataset.shape)
            entries.append((f"fresh{ident.id}", False, list(imgs), lms))
        shuffled = []
        for subject, mem, imgs, lms in entries:
            order = rng.permutation(kmax)
            shuffled.append((subject, mem, [imgs[j] for j in order], [lms[j] for j in order]))
        plan.append(shuffled)

    # one reconstruction per distinct query image
    jobs = {}
    for entries in plan:
        for _, _, imgs, lms in entries:
            for img, lm in zip(imgs, lms):
                jobs.setdefault(query_digest(img), (img, lm))
    keys = sorted(jobs)
    errs = dict(zip(keys, _map(
        lambda k: iia_query_errors([jobs[k][0]], [jobs[k][1]], model, sched, config)[0], keys, workers)))

    reports = {}
    for K in query_counts:
        run_scores = []
        for entries in plan:
            run = []
            for subject, mem, imgs, _ in entries:
                res = iia_from_errors([errs[query_digest(q)] for q in imgs[:K]], threshold)
                run.append(LabeledScore(res.score, mem, subject))
            run_scores.append(run)
        cfg = {"experiment": "iia", "queries_per_identity": K, "n_runs": n_runs, "n_identities": n_identities,
               "attack_seed": seed, "threshold": threshold, "sampler": _sampler_json(config)}
        reports[K] = MetricsReport.from_runs(run_scores, threshold, cfg)
    return reports


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


@dataclass
class ExtractionReport:
    asr_one: float
    asr_mia: float | None
    rmse_match_threshold: float
    mia_threshold: float
    per_query: list
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return math.sqrt(float(np.mean(d * d)))


def best_match_rmse(representatives, targets) -> float:
    """Smallest RMSE between any representative and any target image."""
    return min(rmse(r, t) for r in representatives for t in targets)


def success_rate(values, threshold: float, above: bool = False) -> float:
    """Fraction of values at or below ``threshold`` (at or above with ``above``)."""
    values = list(values)
    if not values:
        raise EvaluationError("no queries")
    hits = sum((v >= threshold) if above else (v <= threshold) for v in values)
    return hits / len(values)


def extraction_queries(dataset: FaceDataset, n_queries: int, seed: int):
    """(identity, image, landmarks) for member-identity queries.

    Fresh renders of train identities when their parameters are known,
    otherwise the train images themselves.
    """
    members = dataset.identities_in("train")
    if not members:
        raise EvaluationError("dataset has no train identities")
    params = dataset.identity_params
    jitter = float(dataset.meta.get("jitter", 0.05))
    out = []
    for j in range(n_queries):
        ident = int(members[j % len(members)])
        if ident in params:
            img, lm = render_identity(params[ident], (1 << 41) + int(seed) * 7919 + j, jitter, dataset.shape)
        else:
            own = [int(i) for i in dataset.indices("train") if dataset.identities[i] == ident]
            i = own[(j // len(members)) % len(own)]
            img, lm = dataset.images[i], dataset.landmarks[i]
        out.append((ident, img, lm))
    return out


def run_extraction_experiment(dataset: FaceDataset, model: Denoiser, sched: NoiseSchedule,
                              config: SamplerConfig | None = None, n_queries: int = 10,
                              rmse_match_threshold: float = 0.15, mia_threshold: float = MIA_THRESHOLD,
                              n_samples: int = 100, K: int = 10, n_masks: int = 10, seed: int = 0,
                              mia_config: SamplerConfig | None = None, workers: int = 1,
                              with_mia: bool = True) -> ExtractionReport:
    """ASR-one and ASR-MIA over member-identity queries.

    A query succeeds for ASR-one when some representative lies within
    ``rmse_match_threshold`` of a training image of the query's identity,
    and for ASR-MIA when some representative scores ``mia_threshold`` or more.
    """
    config = config or SamplerConfig("ancestral", sched.T // 2, 1, int(seed))
    mia_config = mia_config or SamplerConfig("deterministic", sched.T // 2, max(1, sched.T // 50), int(seed))
    queries = extraction_queries(dataset, n_queries, seed)

    def one(q):
        ident, img, lm = q
        suite = build_preserving_suite(lm, img.shape, n_masks, seed)
        res = extraction_attack(img, lm, model, sched, suite, n_samples, K, config)
        targets = dataset.images[dataset.images_of(ident, "train")]
        best = best_match_rmse(res.images, targets)
        confs = [mia_attack(rep, lm, model, sched, None, mia_config, mia_threshold).confidence
                 for rep in res.images] if with_mia else []
        return {"identity": ident, "best_rmse": best, "max_confidence": max(confs) if confs else None,
                "inertia": res.inertia}

    per = _map(one, queries, workers)
    asr_one = success_rate([p["best_rmse"] for p in per], rmse_match_threshold)
    asr_mia = None
    if with_mia:
        asr_mia = success_rate([p["max_confidence"] for p in per], mia_threshold, above=True)
    cfg = {"experiment": "extraction", "n_queries": n_queries, "n_samples": n_samples, "clusters": K,
           "n_masks": n_masks, "attack_seed": seed, "sampler": _sampler_json(config),
           "mia_sampler": _sampler_json(mia_config)}
    return ExtractionReport(asr_one, asr_mia, rmse_match_threshold, mia_threshold, per, cfg)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_timesteps(values, experiment, T: int) -> list:
    """Rerun ``experiment(t_start)`` per value; returns rows of (t_start, mean metrics).

    ``experiment`` returns a MetricsReport (or a ``{K: report}`` dict, in which
    case the largest K is used).
    """
    values = [int(v) for v in values]
    for v in values:
        if not 1 <= v <= T:
            raise EvaluationError(f"t_start {v} outside [1, {T}]")
    rows = []
    for v in values:
        rep = experiment(v)
        if isinstance(rep, dict):
            rep = rep[max(rep)]
        rows.append((v, dict(rep.mean)))
    return rows


def with_t_start(config: SamplerConfig, t_start: int) -> SamplerConfig:
    """Same sampler at another t_start, keeping ~25 recorded estimates."""
    return replace(config, t_start=int(t_start), record_every=max(1, int(t_start) // 25))


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_start", *METRICS])
        for t, m in rows:
            w.writerow([t, *(repr(float(m[k])) for k in METRICS)])


def write_report_csv(path, report: MetricsReport) -> Path:
    report.write_csv(path)
    return Path(path)

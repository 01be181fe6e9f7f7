"""``diffaudit`` command line: generate, train, attack, evaluate, sweep.

Settings come from a flat ``key = value`` file (``--config``) overridden by
flags.  ``--config`` also accepts any JSON report written by this tool, in
which case the embedded ``run_config`` is reused, so a report can be
regenerated from itself.

Exit status: 0 ok, 1 configuration error, 2 data error, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import attacks, evaluation
from .diffusion import (CheckpointError, DivergenceError, SamplerConfig, ScheduleError, TrainConfig,
                        load_checkpoint, make_linear_schedule, save_checkpoint, train, write_loss_curve)
from .faces import (DataError, LandmarkError, LandmarkMap, generate_dataset, load_dataset, read_pnm,
                    save_dataset, write_pnm)
from .occlusion import build_preserving_suite

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3
COMMANDS = ("generate", "train", "attack-mia", "attack-iia", "attack-dea", "evaluate", "sweep")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data: str = "data"
    checkpoint: str = "model/model.dfa"
    out: str = "out"
    # corpus
    n_identities: int = 16
    images_per_identity: int = 4
    height: int = 32
    width: int = 32
    channels: int = 1
    split_fraction: float = 0.6
    split_mode: str = "image_level"
    jitter: float = 0.05
    data_seed: int = 0
    # schedule and training
    timesteps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.02
    epochs: int = 9000
    lr: float = 2e-3
    batch_size: int = 64
    embed_dim: int = 32
    hidden: int = 256
    lr_schedule: str = "cosine"
    train_seed: int = 0
    # sampler; 0 means T/2 and t_start/25
    sampler: str = "deterministic"
    t_start: int = 0
    record_every: int = 0
    attack_seed: int = 0
    # attacks
    mia_threshold: float = 0.6
    iia_threshold: float = 0.5
    n_samples: int = 100
    clusters: int = 10
    n_masks: int = 10
    dea_sampler: str = "ancestral"
    rmse_match_threshold: float = 0.15
    # attack targets; query is a comma-separated list, identity -1 means unset
    query: str = ""
    identity: int = -1
    landmarks: str = ""
    # experiments
    experiment: str = "mia"
    n_queries: int = 20
    n_runs: int = 7
    query_counts: str = "1,3,5,8,10"
    iia_identities: int = 5
    sweep_values: str = ""
    workers: int = 0

    def validate(self) -> "RunConfig":
        for name in ("mia_threshold", "iia_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name}={v} must lie in (0, 1)")
        for name in ("sampler", "dea_sampler"):
            if getattr(self, name) not in ("deterministic", "ancestral"):
                raise ConfigError(f"{name} must be 'deterministic' or 'ancestral'")
        if self.split_mode not in ("image_level", "identity_disjoint"):
            raise ConfigError("split_mode must be 'image_level' or 'identity_disjoint'")
        if self.experiment not in ("mia", "iia", "dea"):
            raise ConfigError("experiment must be one of mia, iia, dea")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        for name in ("n_identities", "images_per_identity", "height", "width", "channels", "epochs",
                     "batch_size", "embed_dim", "hidden", "n_samples", "clusters", "n_masks",
                     "n_queries", "n_runs", "iia_identities"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.t_start < 0 or self.t_start > self.timesteps:
            raise ConfigError(f"t_start={self.t_start} outside [1, {self.timesteps}] (0 = T/2)")
        if self.identity < -1:
            raise ConfigError("identity must be >= 0 (or -1 for unset)")
        if self.record_every < 0 or self.workers < 0:
            raise ConfigError("record_every and workers must be >= 0")
        try:
            self.counts()
            self.sweep()
        except ValueError as exc:
            raise ConfigError(f"malformed integer list: {exc}") from exc
        return self

    def counts(self) -> list[int]:
        return [int(v) for v in self.query_counts.split(",") if v.strip()]

    def sweep(self) -> list[int]:
        if not self.sweep_values.strip():
            T = self.timesteps
            return [max(1, T // 20), T // 4, T // 2, 3 * T // 4, 19 * T // 20]
        return [int(v) for v in self.sweep_values.split(",") if v.strip()]

    def sampler_config(self, t_start: int | None = None, kind: str | None = None) -> SamplerConfig:
        t = t_start or self.t_start or max(1, self.timesteps // 2)
        every = self.record_every or max(1, t // 25)
        return SamplerConfig(kind or self.sampler, int(t), int(every), int(self.attack_seed))

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           embed_dim=self.embed_dim, hidden=self.hidden, seed=self.train_seed,
                           lr_schedule=self.lr_schedule)

    def queries(self) -> list[str]:
        return [q.strip() for q in self.query.split(",") if q.strip()]

    def n_workers(self) -> int:
        return self.workers or (os.cpu_count() or 1)

    def resolved(self) -> dict:
        """Config as embedded in artifacts; ``workers`` is excluded since it never changes results."""
        d = asdict(self)
        d.pop("workers")
        return d


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig, key)
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from exc
    return str(raw).strip()


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, val)
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if "run_config" not in obj:
            raise ConfigError(f"{path}: JSON file has no run_config")
        return {k: _coerce(k, str(v)) for k, v in obj["run_config"].items()}
    return parse_config_text(text, str(path))


def write_config_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.resolved().items())


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_model(cfg: RunConfig):
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    model, sched = load_checkpoint(path)
    sidecar = path.with_suffix(".json")
    provenance = json.loads(sidecar.read_text()).get("run_config", {}) if sidecar.is_file() else {}
    return model, sched, provenance


def _load_data(cfg: RunConfig):
    path = Path(cfg.data)
    if not (path / "labels.csv").is_file():
        raise DataError(f"dataset not found: {path / 'labels.csv'}")
    return load_dataset(path)


def _resolve_query(ds, spec: str, landmarks: str | None):
    """A dataset filename (with or without extension) or a PNM path plus landmark sidecar."""
    stem = Path(spec).stem
    if stem in ds.filenames and not Path(spec).is_file():
        i = ds.filenames.index(stem)
        return ds.images[i], ds.landmarks[i], stem
    path = Path(spec)
    if not path.is_file():
        raise DataError(f"query not found: {spec}")
    img = read_pnm(path)
    if landmarks is None:
        if stem in ds.filenames:
            return img, ds.landmarks[ds.filenames.index(stem)], stem
        raise DataError(f"no landmarks for {path.name}; pass --landmarks")
    side = json.loads(Path(landmarks).read_text())
    if path.name not in side:
        raise LandmarkError(f"no landmarks for {path.name}")
    return img, LandmarkMap.from_json(side[path.name]).validate(*img.shape[:2], disjoint=False), stem


def _report(cfg: RunConfig, command: str, body: dict, provenance: dict) -> dict:
    return {"command": command, "run_config": cfg.resolved(), "model_provenance": provenance, **body}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> str:
    ds = generate_dataset(cfg.n_identities, cfg.images_per_identity, (cfg.height, cfg.width, cfg.channels),
                          cfg.split_fraction, cfg.split_mode, cfg.data_seed, cfg.jitter)
    ds.meta["run_config"] = cfg.resolved()
    out = Path(cfg.data)
    save_dataset(ds, out)
    return f"wrote {len(ds)} images ({len(ds.indices('train'))} train) to {out}"


def cmd_train(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    try:
        sched = make_linear_schedule(cfg.timesteps, cfg.beta_min, cfg.beta_max)
    except ScheduleError as exc:
        raise ConfigError(str(exc)) from exc
    res = train(ds.split_images("train"), sched, cfg.train_config())
    path = Path(cfg.checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, res.model, sched)
    write_loss_curve(path.with_suffix(".loss.csv"), res.loss_curve)
    _dump(path.with_suffix(".json"), {"run_config": cfg.resolved(), "initial_loss": res.initial_loss,
                                      "final_loss": res.loss_curve[-1], "dataset_meta": ds.meta})
    return f"trained {cfg.epochs} epochs, loss {res.initial_loss:.4f} -> {res.loss_curve[-1]:.4f}; wrote {path}"


def cmd_attack_mia(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    model, sched, prov = _load_model(cfg)
    if cfg.identity >= 0:
        targets = [(ds.images[i], ds.landmarks[i], ds.filenames[i]) for i in ds.images_of(cfg.identity)]
        if not targets:
            raise DataError(f"identity {cfg.identity} not in {cfg.data}")
    elif cfg.queries():
        targets = [_resolve_query(ds, q, cfg.landmarks or None) for q in cfg.queries()]
    else:
        raise ConfigError("attack-mia needs --query or --identity")
    sampler = cfg.sampler_config()
    res = attacks._map(lambda t: attacks.mia_attack(t[0], t[1], model, sched, None, sampler, cfg.mia_threshold),
                       targets, cfg.n_workers())
    body = {"sampler": asdict(sampler),
            "queries": [{"query": t[2], **r.to_json()} for t, r in zip(targets, res)]}
    out = Path(cfg.out) / "mia_report.json"
    _dump(out, _report(cfg, "attack-mia", body, prov))
    return " ".join(f"{t[2]}:C={r.confidence:.4f}" for t, r in zip(targets, res)) + f" -> {out}"


def cmd_attack_iia(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    model, sched, prov = _load_model(cfg)
    if cfg.identity >= 0:
        idx = ds.images_of(cfg.identity)
        if not len(idx):
            raise DataError(f"identity {cfg.identity} not in {cfg.data}")
        k = max(cfg.counts() or [len(idx)])
        idx = idx[:k]
        queries, lms, names = ds.images[idx], [ds.landmarks[i] for i in idx], [ds.filenames[i] for i in idx]
    elif cfg.queries():
        got = [_resolve_query(ds, q, cfg.landmarks or None) for q in cfg.queries()]
        queries, lms, names = [g[0] for g in got], [g[1] for g in got], [g[2] for g in got]
    else:
        raise ConfigError("attack-iia needs --query or --identity")
    sampler = cfg.sampler_config()
    res = attacks.iia_attack(list(queries), lms, model, sched, sampler, threshold=cfg.iia_threshold)
    body = {"sampler": asdict(sampler), "identity": cfg.identity if cfg.identity >= 0 else None, "query_names": names, **res.to_json()}
    out = Path(cfg.out) / "iia_report.json"
    _dump(out, _report(cfg, "attack-iia", body, prov))
    return f"S_II={res.score:.4f} member={res.member} ({len(names)} queries) -> {out}"


def cmd_attack_dea(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    model, sched, prov = _load_model(cfg)
    if cfg.queries():
        img, lm, name = _resolve_query(ds, cfg.queries()[0], cfg.landmarks or None)
    elif cfg.identity >= 0:
        idx = ds.images_of(cfg.identity)
        if not len(idx):
            raise DataError(f"identity {cfg.identity} not in {cfg.data}")
        img, lm, name = ds.images[idx[0]], ds.landmarks[idx[0]], ds.filenames[idx[0]]
    else:
        raise ConfigError("attack-dea needs --query or --identity")
    sampler = cfg.sampler_config(kind=cfg.dea_sampler)
    suite = build_preserving_suite(lm, img.shape, cfg.n_masks, cfg.attack_seed)
    res = attacks.extraction_attack(img, lm, model, sched, suite, cfg.n_samples, cfg.clusters, sampler)
    mia_sampler = cfg.sampler_config()
    confs = attacks._map(lambda rep: attacks.mia_attack(rep, lm, model, sched, None, mia_sampler,
                                                        cfg.mia_threshold).confidence,
                         list(res.images), cfg.n_workers())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if img.shape[2] == 1 else ".ppm"
    clusters = []
    for k, (rep, c) in enumerate(zip(res.images, confs)):
        fname = f"representative_{k:02d}{ext}"
        write_pnm(out / fname, rep)
        clusters.append({"cluster": k, "file": fname, "sample": res.representatives[k],
                         "size": int(np.sum(res.assignments == k)), "mia_confidence": c})
    body = {"query": name, "sampler": asdict(sampler), "mia_sampler": asdict(mia_sampler),
            "inertia": res.inertia, "n_iter": res.n_iter, "converged": res.converged,
            "masks": suite.manifest(), "clusters": clusters}
    _dump(out / "manifest.json", _report(cfg, "attack-dea", body, prov))
    return f"{len(clusters)} representatives, inertia {res.inertia:.4f}, max C {max(confs):.4f} -> {out}"


def _run_experiment(cfg: RunConfig, ds, model, sched, t_start: int | None = None):
    sampler = cfg.sampler_config(t_start)
    if cfg.experiment == "mia":
        return evaluation.run_mia_experiment(ds, model, sched, sampler, cfg.n_queries, cfg.n_runs,
                                             cfg.attack_seed, cfg.mia_threshold, cfg.n_workers())
    if cfg.experiment == "iia":
        return evaluation.run_iia_experiment(ds, model, sched, sampler, cfg.counts(), cfg.n_runs,
                                             cfg.attack_seed, cfg.iia_identities, cfg.iia_threshold,
                                             cfg.n_workers())
    return evaluation.run_extraction_experiment(
        ds, model, sched, cfg.sampler_config(t_start, cfg.dea_sampler), cfg.n_queries,
        cfg.rmse_match_threshold, cfg.mia_threshold, cfg.n_samples, cfg.clusters, cfg.n_masks,
        cfg.attack_seed, sampler, cfg.n_workers())


def cmd_evaluate(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    model, sched, prov = _load_model(cfg)
    rep = _run_experiment(cfg, ds, model, sched)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(rep, dict):
        body = {"reports": {str(k): r.to_json() for k, r in rep.items()}}
        for k, r in rep.items():
            r.write_csv(out / f"iia_k{k}.csv")
        summary = " ".join(f"K={k}:AUC={r.mean['auc_roc']:.3f}" for k, r in rep.items())
    elif isinstance(rep, evaluation.ExtractionReport):
        body = {"report": rep.to_json()}
        summary = f"ASR-one={rep.asr_one:.3f} ASR-MIA={rep.asr_mia:.3f}"
    else:
        rep.write_csv(out / "mia_metrics.csv")
        body = {"report": rep.to_json()}
        summary = " ".join(f"{k}={rep.mean[k]:.3f}" for k in evaluation.METRICS)
    path = out / f"evaluate_{cfg.experiment}.json"
    _dump(path, _report(cfg, "evaluate", body, prov))
    return f"{summary} -> {path}"


def cmd_sweep(cfg: RunConfig, args) -> str:
    ds = _load_data(cfg)
    model, sched, prov = _load_model(cfg)
    if cfg.experiment == "dea":
        raise ConfigError("sweep supports experiment = mia or iia")
    rows = evaluation.sweep_timesteps(cfg.sweep(), lambda t: _run_experiment(cfg, ds, model, sched, t),
                                      sched.T)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_sweep_csv(out / f"sweep_{cfg.experiment}.csv", rows)
    _dump(out / f"sweep_{cfg.experiment}.json",
          _report(cfg, "sweep", {"rows": [{"t_start": t, **m} for t, m in rows]}, prov))
    return " ".join(f"t={t}:AUC={m['auc_roc']:.3f}" for t, m in rows) + f" -> {out}"


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "attack-mia": cmd_attack_mia,
            "attack-iia": cmd_attack_iia, "attack-dea": cmd_attack_dea, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep}

PROFILES = {
    "fast": {"n_queries": 20, "n_runs": 7, "iia_identities": 5, "query_counts": "1,5"},
    "full": {"n_queries": 100, "n_runs": 7, "iia_identities": 10, "query_counts": "1,3,5,8,10"},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffaudit", description="Privacy audit of a small diffusion model.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value file, or a JSON report to rerun")
    p.add_argument("--seed", type=int, help="seed for this command's randomness")
    p.add_argument("--workers", type=int, help="worker threads (default: logical CPUs)")
    p.add_argument("--out", help="output directory (dataset dir for generate)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--query", action="append", help="dataset file name or PGM/PPM path; repeatable")
    p.add_argument("--landmarks", help="landmark JSON for --query images outside the dataset")
    p.add_argument("--identity", type=int, help="identity id in the dataset")
    p.add_argument("--t-start", type=int, dest="t_start")
    p.add_argument("--threshold", type=float)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--experiment", choices=("mia", "iia", "dea"))
    p.add_argument("--profile", choices=tuple(PROFILES))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    return p


_SEED_KEY = {"generate": "data_seed", "train": "train_seed"}


def resolve_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    if args.profile:
        values.update(PROFILES[args.profile])
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _coerce(k.strip(), v)
    for key in ("workers", "data", "checkpoint", "t_start", "timesteps", "epochs", "experiment"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.out is not None:
        values["data" if args.command == "generate" else "out"] = args.out
    if args.seed is not None:
        values[_SEED_KEY.get(args.command, "attack_seed")] = args.seed
    if args.query:
        values["query"] = ",".join(args.query)
    if args.identity is not None:
        values["identity"] = args.identity
    if args.landmarks is not None:
        values["landmarks"] = args.landmarks
    if args.threshold is not None:
        values["iia_threshold" if args.command == "attack-iia" else "mia_threshold"] = args.threshold
    return RunConfig(**values).validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        msg = HANDLERS[args.command](cfg, args)
    except (ConfigError, ScheduleError, attacks.AttackError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, LandmarkError, CheckpointError, evaluation.EvaluationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())

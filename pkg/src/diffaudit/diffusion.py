"""Minimal DDPM: linear noise schedule, MLP noise predictor, DDPM/DDIM samplers.

Timesteps are 1-based throughout (``1 <= t <= T``); schedule arrays are stored
0-based, so ``sched.alpha_bar[t - 1]`` is the cumulative product up to step t.
Images are float64 arrays shaped ``(H, W, C)``; every sampling routine also
accepts a leading batch axis.  Nothing here clamps to [0, 1].
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DFA1"
CHECKPOINT_VERSION = 1


class ScheduleError(ValueError):
    """Invalid noise schedule parameters or timestep."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        """Cumulative signal retention at step t, with abar(0) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_linear_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    T = int(T)
    beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    posterior_var = np.empty(T)
    posterior_var[0] = beta[0]
    posterior_var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    for arr in (beta, alpha, alpha_bar, posterior_var):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_min), float(beta_max), beta, alpha, alpha_bar, posterior_var)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0) sample for caller-supplied standard-normal ``eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.abar(sched.check_t(t))
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape ``(len(t), dim)``: sines then cosines."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _silu(z):
    s = expit(z)
    return z * s, s


PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


# fixed input/output preconditioning for images in [0, 1]
DATA_CENTER = 0.5
DATA_SCALE = 0.25
# the raw output is squashed to (-OUTPUT_LIMIT, OUTPUT_LIMIT), so x0 estimates
# stay within (-0.5, 1.5) and reverse chains stay bounded on any input
OUTPUT_LIMIT = 4.0


@dataclass
class Denoiser:
    """eps_theta built from a three-layer MLP that estimates the clean image.

    The MLP sees ``[(x_t - sqrt(abar) * c) / sqrt(abar * s^2 + 1 - abar), embed(t)]``
    and outputs F; the clean estimate is ``c + s * L * tanh(F / L)`` and the noise prediction
    follows from the forward-process identity.  ``c``/``s`` are the fixed
    DATA_CENTER/DATA_SCALE/OUTPUT_LIMIT constants.  Two SiLU hidden layers.
    """

    image_shape: tuple[int, int, int]
    embed_dim: int
    hidden: tuple[int, int]
    params: dict[str, np.ndarray] = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    @classmethod
    def init(cls, image_shape, sched: NoiseSchedule, embed_dim: int = 32, hidden=(256, 256),
             seed: int = 0) -> "Denoiser":
        if isinstance(hidden, int):
            hidden = (hidden, hidden)
        image_shape = tuple(int(v) for v in image_shape)
        d = int(np.prod(image_shape))
        rng = np.random.default_rng(seed)
        dims = [d + embed_dim, hidden[0], hidden[1], d]
        params = {}
        for i in range(3):
            fan_in, fan_out = dims[i], dims[i + 1]
            scale = math.sqrt(2.0 / fan_in) if i < 2 else math.sqrt(1.0 / fan_in)
            params[f"W{i + 1}"] = rng.normal(0.0, scale, size=(fan_in, fan_out))
            params[f"b{i + 1}"] = np.zeros(fan_out)
        return cls(image_shape, int(embed_dim), (int(hidden[0]), int(hidden[1])), params,
                   sched.alpha_bar)

    @property
    def dim(self) -> int:
        return int(np.prod(self.image_shape))

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Denoiser":
        return Denoiser(self.image_shape, self.embed_dim, self.hidden,
                        {k: v.copy() for k, v in self.params.items()}, self.alpha_bar)

    def _coefs(self, t: np.ndarray):
        ab = self.alpha_bar[np.asarray(t, dtype=np.int64) - 1][:, None]
        return np.sqrt(ab), np.sqrt(1.0 - ab), np.sqrt(ab * DATA_SCALE ** 2 + 1.0 - ab)

    def _forward(self, x_flat: np.ndarray, t: np.ndarray):
        p = self.params
        sab, s1m, norm = self._coefs(t)
        y = (x_flat - sab * DATA_CENTER) / norm
        inp = np.concatenate([y, timestep_embedding(t, self.embed_dim)], axis=1)
        z1 = inp @ p["W1"] + p["b1"]
        h1, g1 = _silu(z1)
        z2 = h1 @ p["W2"] + p["b2"]
        h2, g2 = _silu(z2)
        th = np.tanh((h2 @ p["W3"] + p["b3"]) / OUTPUT_LIMIT)
        x0 = DATA_CENTER + DATA_SCALE * OUTPUT_LIMIT * th
        eps = (x_flat - sab * x0) / s1m
        return eps, (inp, z1, g1, h1, z2, g2, h2, th, sab / s1m)

    def predict_noise(self, x: np.ndarray, t) -> np.ndarray:
        """eps_theta(x, t) for a single image or a batch; ``t`` scalar or per-row."""
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.image_shape
        xb = x.reshape(1 if single else x.shape[0], self.dim)
        tb = np.broadcast_to(np.asarray(t, dtype=np.int64), (xb.shape[0],))
        out, _ = self._forward(xb, tb)
        return out.reshape(x.shape)

    def loss_and_grads(self, x_t: np.ndarray, t: np.ndarray, eps: np.ndarray):
        """Mean squared noise-prediction error over batch and pixels, with gradients."""
        n = x_t.shape[0]
        xb = x_t.reshape(n, self.dim)
        eb = eps.reshape(n, self.dim)
        out, (inp, z1, g1, h1, z2, g2, h2, th, snr) = self._forward(xb, np.asarray(t, dtype=np.int64))
        diff = out - eb
        loss = float(np.mean(diff * diff))
        p = self.params
        # d eps / d F = -sqrt(abar) * scale * (1 - tanh^2) / sqrt(1 - abar)
        g_f = diff * (-2.0 * DATA_SCALE / diff.size) * snr * (1.0 - th * th)
        grads = {"W3": h2.T @ g_f, "b3": g_f.sum(axis=0)}
        g_z2 = (g_f @ p["W3"].T) * (g2 * (1.0 + z2 * (1.0 - g2)))
        grads["W2"] = h1.T @ g_z2
        grads["b2"] = g_z2.sum(axis=0)
        g_z1 = (g_z2 @ p["W2"].T) * (g1 * (1.0 + z1 * (1.0 - g1)))
        grads["W1"] = inp.T @ g_z1
        grads["b1"] = g_z1.sum(axis=0)
        return loss, grads

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params, grads):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        step = self.lr / c1
        for k in PARAM_NAMES:
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            np.multiply(g, g, out=g)
            g *= 1.0 - self.b2
            v += g
            # g is scratch from here on
            np.multiply(v, 1.0 / c2, out=g)
            np.sqrt(g, out=g)
            g += self.eps
            np.divide(m, g, out=g)
            g *= step
            params[k] -= g


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    embed_dim: int = 32
    hidden: int = 256
    seed: int = 0
    # noise draws per image per epoch; >1 packs more updates into an epoch
    repeats: int = 1
    # "cosine" anneals the step size to zero over the run; "constant" keeps lr
    lr_schedule: str = "cosine"
    log_every: int = 0


@dataclass
class TrainResult:
    model: Denoiser
    loss_curve: list[float]
    initial_loss: float


def dataset_loss(model: Denoiser, images: np.ndarray, sched: NoiseSchedule, seed: int = 12345,
                 draws: int = 4) -> float:
    """Monte-Carlo estimate of the training objective with a fixed noise draw."""
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    total = 0.0
    for _ in range(draws):
        t = rng.integers(1, sched.T + 1, size=n)
        eps = rng.standard_normal(images.shape)
        ab = sched.alpha_bar[t - 1].reshape((n,) + (1,) * (images.ndim - 1))
        xt = np.sqrt(ab) * images + np.sqrt(1.0 - ab) * eps
        loss, _ = model.loss_and_grads(xt, t, eps)
        total += loss
    return total / draws


def train(images: np.ndarray, sched: NoiseSchedule, config: TrainConfig | None = None,
          model: Denoiser | None = None) -> TrainResult:
    """Fit eps_theta on ``images`` (shape ``(N, H, W, C)``) with Adam.

    One epoch is ``repeats`` shuffled passes over the images in minibatches,
    each example getting a fresh (t, eps) draw.  Deterministic for a seed.
    """
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("training split is empty" if images.ndim == 4 else
                         f"expected (N, H, W, C) images, got shape {images.shape}")
    n = images.shape[0]
    if model is None:
        model = Denoiser.init(images.shape[1:], sched, config.embed_dim, config.hidden, seed=config.seed)
    elif model.image_shape != images.shape[1:]:
        raise ValueError(f"model shape {model.image_shape} != image shape {images.shape[1:]}")
    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(model.params, lr=config.lr)
    initial = dataset_loss(model, images, sched)
    curve: list[float] = []
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)
    if config.lr_schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown lr schedule {config.lr_schedule!r}")
    bs = max(1, min(config.batch_size, n * config.repeats))
    steps_per_epoch = -(-n * config.repeats // bs)
    total_steps = max(1, config.epochs * steps_per_epoch)
    for epoch in range(config.epochs):
        order = np.concatenate([rng.permutation(n) for _ in range(config.repeats)])
        total, count = 0.0, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            x0 = images[idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            shape = (len(idx), 1, 1, 1)
            xt = sqrt_ab[t - 1].reshape(shape) * x0 + sqrt_1mab[t - 1].reshape(shape) * eps
            loss, grads = model.loss_and_grads(xt, t, eps)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}")
            if config.lr_schedule == "cosine":
                opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * opt.step_count / total_steps))
            opt.step(model.params, grads)
            total += loss * len(idx)
            count += len(idx)
        curve.append(total / count)
        if not model.is_finite():
            raise DivergenceError(f"non-finite parameters after epoch {epoch + 1}")
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("epoch %d loss %.5f", epoch + 1, curve[-1])
    return TrainResult(model, curve, initial)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve, start=1):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "deterministic"  # or "ancestral"
    t_start: int = 100
    record_every: int = 4
    rng_seed: int = 0

    def validate(self, sched: NoiseSchedule) -> None:
        if self.kind not in ("deterministic", "ancestral"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        sched.check_t(self.t_start)
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


def default_sampler(sched: NoiseSchedule, kind: str = "deterministic", t_start: int | None = None,
                    rng_seed: int = 0) -> SamplerConfig:
    """Mid-range start with roughly 25 recorded estimates per trajectory."""
    t_start = t_start if t_start is not None else max(1, sched.T // 2)
    return SamplerConfig(kind, t_start, max(1, t_start // 25), rng_seed)


def predict_x0(xt: np.ndarray, t: int, model: Denoiser, sched: NoiseSchedule,
               eps_hat: np.ndarray | None = None) -> np.ndarray:
    ab = sched.abar(sched.check_t(t))
    if eps_hat is None:
        eps_hat = model.predict_noise(xt, t)
    return (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def reverse_step(xt: np.ndarray, t: int, model: Denoiser, sched: NoiseSchedule,
                 config: SamplerConfig, rng: np.random.Generator | None = None,
                 eps_hat: np.ndarray | None = None) -> np.ndarray:
    """One x_t -> x_{t-1} update.

    Ancestral noise comes from ``rng`` if given, else from a generator seeded
    with ``(config.rng_seed, t)``.  No noise is added on the final step.
    """
    t = sched.check_t(t)
    xt = np.asarray(xt, dtype=np.float64)
    if eps_hat is None:
        eps_hat = model.predict_noise(xt, t)
    if config.kind == "deterministic":
        ab_prev = sched.abar(t - 1)
        x0 = predict_x0(xt, t, model, sched, eps_hat)
        return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat
    if config.kind != "ancestral":
        raise ValueError(f"unknown sampler kind {config.kind!r}")
    # the posterior variance scales both the eps term and the injected noise
    var = float(sched.posterior_var[t - 1])
    mean = (xt - var / math.sqrt(1.0 - sched.abar(t)) * eps_hat) / math.sqrt(float(sched.alpha[t - 1]))
    if t == 1:
        return mean
    if rng is None:
        rng = np.random.default_rng([config.rng_seed, t])
    z = rng.standard_normal(xt.shape)
    return mean + math.sqrt(var) * z


def recorded_steps(t_start: int, record_every: int) -> list[int]:
    """Timesteps whose x0 estimate is recorded, decreasing, always ending at 1."""
    return [t for t in range(t_start, 0, -1) if (t - 1) % record_every == 0]


def run_reverse(xt: np.ndarray, model: Denoiser, sched: NoiseSchedule, config: SamplerConfig,
                rng: np.random.Generator | None = None):
    """Reverse from ``config.t_start`` to 0, returning (trajectory, x_0).

    ``trajectory`` is a list of ``(t, x0_estimate)`` in decreasing t order.
    """
    config.validate(sched)
    if rng is None:
        rng = np.random.default_rng([config.rng_seed, 7])
    x = np.asarray(xt, dtype=np.float64)
    traj = []
    for t in range(config.t_start, 0, -1):
        eps_hat = model.predict_noise(x, t)
        if (t - 1) % config.record_every == 0:
            traj.append((t, predict_x0(x, t, model, sched, eps_hat)))
        x = reverse_step(x, t, model, sched, config, rng=rng, eps_hat=eps_hat)
    return traj, x


def reconstruct_trajectory(xq: np.ndarray, mask, model: Denoiser, sched: NoiseSchedule,
                           config: SamplerConfig, rng: np.random.Generator | None = None,
                           eps: np.ndarray | None = None):
    """Mask, forward-noise to ``t_start`` and denoise, recording x0 estimates.

    ``mask`` is a PixelMask, a raw ``(H, W)`` bit array, or None for no mask.
    Works on one image or a batch sharing one mask.  Returns (trajectory, x_0).
    """
    from .occlusion import apply_mask

    config.validate(sched)
    xq = np.asarray(xq, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    xm = xq if mask is None else apply_mask(xq, mask)
    if eps is None:
        eps = rng.standard_normal(xm.shape)
    xt = forward_noise(xm, config.t_start, eps, sched)
    return run_reverse(xt, model, sched, config, rng=rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: Denoiser, sched: NoiseSchedule) -> None:
    """Little-endian layout: magic, u32 version, u32 T, f64 beta_min, f64 beta_max,
    u32 H, W, C, embed_dim, hidden1, hidden2, then W1 b1 W2 b2 W3 b3 as f64
    (row-major)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIdd", CHECKPOINT_VERSION, sched.T, sched.beta_min, sched.beta_max))
        fh.write(struct.pack("<6I", *model.image_shape, model.embed_dim, *model.hidden))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[Denoiser, NoiseSchedule]:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a DFA1 checkpoint")
        version, T, bmin, bmax = struct.unpack("<IIdd", _read_exact(fh, 24, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        H, W, C, emb, h1, h2 = struct.unpack("<6I", _read_exact(fh, 24, "dimensions"))
        d = H * W * C
        shapes = {"W1": (d + emb, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
                  "W3": (h2, d), "b3": (d,)}
        params = {}
        for name in PARAM_NAMES:
            count = int(np.prod(shapes[name]))
            raw = _read_exact(fh, 8 * count, name)
            params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shapes[name])
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    sched = make_linear_schedule(T, bmin, bmax)
    return Denoiser((H, W, C), emb, (h1, h2), params, sched.alpha_bar), sched

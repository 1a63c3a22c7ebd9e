"""Small time-conditioned MLPs with hand-written backprop and Adam.

One network type serves two heads:

* ``score`` -- outputs an estimate of ``grad log p_t(x)`` (same dim as data);
* ``disc`` -- outputs a single logit, ``d(x, t) = sigmoid(logit)``.

Time enters through a sinusoidal embedding of ``t / t_max`` concatenated to x.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
from scipy.special import expit

from .analytic_oracle import GaussianMixture
from .diffusion_sde import ScheduleSpec, kernel_coeffs, perturb, schedule_eval

log = logging.getLogger(__name__)

HEADS = ("score", "disc")
WEIGHTINGS = ("likelihood", "uniform", "noise")
DEFAULT_TRUNCATION = 1e-5

_MAGIC = b"DGNETv"
_VERSION = 1
_OPEN_LO, _OPEN_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)

DataSource = Union[GaussianMixture, np.ndarray]


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str = "loss is not finite"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class ParamsLoadError(ValueError):
    pass


@dataclass
class NetParams:
    head: str
    data_dim: int
    hidden: tuple[int, ...]
    emb_dim: int
    t_max: float
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        sizes = layer_sizes(self.data_dim, self.hidden, self.emb_dim, self.head)
        shapes = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        if [w.shape for w in self.weights] != shapes or [b.shape for b in self.biases] != [s[1:] for s in shapes]:
            raise ValueError("weight shapes do not match the architecture")

    @property
    def out_dim(self) -> int:
        return self.data_dim if self.head == "score" else 1

    def copy(self) -> NetParams:
        return NetParams(self.head, self.data_dim, self.hidden, self.emb_dim, self.t_max,
                         [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def tensors(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def equals(self, other: NetParams) -> bool:
        return (
            (self.head, self.data_dim, self.hidden, self.emb_dim, self.t_max)
            == (other.head, other.data_dim, other.hidden, other.emb_dim, other.t_max)
            and all(np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))
        )


def layer_sizes(data_dim: int, hidden: Sequence[int], emb_dim: int, head: str) -> list[int]:
    out = data_dim if head == "score" else 1
    return [data_dim + emb_dim, *hidden, out]


def init_params(data_dim: int, head: str, rng: np.random.Generator, hidden=(128, 128, 128),
                emb_dim: int = 32, t_max: float = 1.0) -> NetParams:
    """He-style init for hidden layers; the output layer starts at zero."""
    sizes = layer_sizes(data_dim, hidden, emb_dim, head)
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        weights.append(np.zeros((a, b)) if last else rng.standard_normal((a, b)) * math.sqrt(2.0 / a))
        biases.append(np.zeros(b))
    return NetParams(head, data_dim, tuple(hidden), emb_dim, float(t_max), weights, biases)


def zero_params(data_dim: int, head: str, hidden=(128, 128, 128), emb_dim: int = 32,
                t_max: float = 1.0) -> NetParams:
    sizes = layer_sizes(data_dim, hidden, emb_dim, head)
    weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    return NetParams(head, data_dim, tuple(hidden), emb_dim, float(t_max), weights,
                     [np.zeros(b) for b in sizes[1:]])


# -- forward / backward -------------------------------------------------------

def time_embedding(t, n: int, emb_dim: int, t_max: float) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    freqs = np.geomspace(1.0, 64.0, emb_dim // 2)
    phase = (t / t_max)[:, None] * freqs[None]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _sigmoid(z):
    return 0.5 + 0.5 * np.tanh(0.5 * z)


class _Cache(NamedTuple):
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    gates: list[np.ndarray]


def _forward(params: NetParams, x, t) -> tuple[np.ndarray, _Cache]:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.data_dim:
        raise ValueError(f"expected inputs of dim {params.data_dim}, got {x.shape}")
    h = np.concatenate([x, time_embedding(t, x.shape[0], params.emb_dim, params.t_max)], axis=1)
    inputs, pre, gates = [], [], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        if i == n_layers - 1:
            return z, _Cache(inputs, pre, gates)
        gate = _sigmoid(z)
        pre.append(z)
        gates.append(gate)
        h = z * gate  # SiLU
    raise AssertionError("unreachable")


def _backward(params: NetParams, cache: _Cache, grad_out: np.ndarray, want_params: bool = True):
    """Reverse pass. Returns (param grads as [dW..., db...] or None, grad wrt x)."""
    d_ws, d_bs = [], []
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        if want_params:
            d_ws.append(cache.inputs[i].T @ g)
            d_bs.append(g.sum(axis=0))
        g = g @ params.weights[i].T
        if i > 0:
            z, gate = cache.pre[i - 1], cache.gates[i - 1]
            g = g * (gate * (1.0 + z * (1.0 - gate)))
    grad_x = g[:, : params.data_dim]
    grads = [*d_ws[::-1], *d_bs[::-1]] if want_params else None
    return grads, grad_x


def _require_head(params: NetParams, head: str) -> None:
    if params.head != head:
        raise ValueError(f"network has a {params.head!r} head, expected {head!r}")


def forward_score(params: NetParams, x, t) -> np.ndarray:
    _require_head(params, "score")
    out, _ = _forward(params, x, t)
    return out


def disc_logit(params: NetParams, x, t) -> np.ndarray:
    _require_head(params, "disc")
    out, _ = _forward(params, x, t)
    return out[:, 0]


def forward_disc(params: NetParams, x, t) -> np.ndarray:
    """Raw (untruncated) discriminator probability, kept strictly inside (0, 1)."""
    return np.clip(expit(disc_logit(params, x, t)), _OPEN_LO, _OPEN_HI)


def truncate(d, truncation: float = DEFAULT_TRUNCATION):
    return np.clip(d, truncation, 1.0 - truncation)


def logit_bound(truncation: float = DEFAULT_TRUNCATION) -> float:
    return math.log((1.0 - truncation) / truncation)


def log_odds(params: NetParams, x, t, truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """``log(d / (1 - d))`` with ``d`` truncated to ``[trunc, 1 - trunc]``."""
    # clipping the logit is the same map as truncating d, without the rounding of log(d)
    bound = logit_bound(truncation)
    return np.clip(disc_logit(params, x, t), -bound, bound)


def logit_input_grad(params: NetParams, x, t, truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """Input gradient of the truncated log-odds; zero where truncation is active."""
    _require_head(params, "disc")
    out, cache = _forward(params, x, t)
    _, gx = _backward(params, cache, np.ones_like(out), want_params=False)
    active = np.abs(out[:, 0]) < logit_bound(truncation)
    return np.where(active[:, None], gx, 0.0)


# -- losses -------------------------------------------------------------------

def loss_weight(spec: ScheduleSpec, t, weighting: str) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if weighting == "likelihood":
        return schedule_eval(spec, t).g ** 2
    if weighting == "uniform":
        return np.ones_like(t)
    if weighting == "noise":
        return kernel_coeffs(spec, t).std ** 2
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


class DSMBatch(NamedTuple):
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray
    weight: np.ndarray
    span: float


def dsm_batch(x0, spec: ScheduleSpec, rng: np.random.Generator, weighting: str = "likelihood",
              t_eps: float = 1e-3, t_max: float | None = None) -> DSMBatch:
    """Perturb ``x0`` at uniform random times and build denoising targets."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t_max = spec.t_max if t_max is None else t_max
    n = x0.shape[0]
    t = rng.uniform(t_eps, t_max, size=n)
    noise = rng.standard_normal(x0.shape)
    x_t = perturb(x0, t, noise, spec)
    std = kernel_coeffs(spec, t).std
    target = -noise / std[:, None]
    return DSMBatch(t, x_t, target, loss_weight(spec, t, weighting), t_max - t_eps)


def dsm_loss(pred: np.ndarray, batch: DSMBatch) -> float:
    """``1/2 int lambda E||pred - target||^2 dt`` estimated on one batch."""
    sq = ((pred - batch.target) ** 2).sum(axis=1)
    return float(0.5 * batch.span * np.mean(batch.weight * sq))


ScoreModel = Union[NetParams, Callable[[np.ndarray, np.ndarray], np.ndarray]]
DiscModel = Union[NetParams, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def score_loss(model: ScoreModel, x0, spec: ScheduleSpec, rng: np.random.Generator,
               weighting: str = "likelihood", t_eps: float = 1e-3) -> float:
    batch = dsm_batch(x0, spec, rng, weighting, t_eps)
    pred = forward_score(model, batch.x_t, batch.t) if isinstance(model, NetParams) else model(batch.x_t, batch.t)
    return dsm_loss(pred, batch)


def _score_loss_and_grad(params: NetParams, batch: DSMBatch):
    out, cache = _forward(params, batch.x_t, batch.t)
    resid = out - batch.target
    n = out.shape[0]
    loss = 0.5 * batch.span * np.mean(batch.weight * (resid**2).sum(axis=1))
    grad_out = batch.span * batch.weight[:, None] * resid / n
    grads, _ = _backward(params, cache, grad_out)
    return float(loss), grads


class DiscBatch(NamedTuple):
    t: np.ndarray
    real_t: np.ndarray
    fake_t: np.ndarray
    weight: np.ndarray
    span: float


def disc_batch(real, fake, spec: ScheduleSpec, rng: np.random.Generator, weighting: str = "uniform",
               t_eps: float = 1e-3) -> DiscBatch:
    """Perturb real and fake points with one shared draw of times."""
    real = np.atleast_2d(np.asarray(real, dtype=float))
    fake = np.atleast_2d(np.asarray(fake, dtype=float))
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise ValueError("empty batch")
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have equal shapes")
    n = real.shape[0]
    t = rng.uniform(t_eps, spec.t_max, size=n)
    real_t = perturb(real, t, rng.standard_normal(real.shape), spec)
    fake_t = perturb(fake, t, rng.standard_normal(fake.shape), spec)
    return DiscBatch(t, real_t, fake_t, loss_weight(spec, t, weighting), spec.t_max - t_eps)


def _bce(d_real, d_fake, batch: DiscBatch, truncation: float) -> float:
    d_real = truncate(d_real, truncation)
    d_fake = truncate(d_fake, truncation)
    per = -np.log(d_real) - np.log1p(-d_fake)
    return float(batch.span * np.mean(batch.weight * per))


def disc_loss(model: DiscModel, real, fake, spec: ScheduleSpec, rng: np.random.Generator,
              weighting: str = "uniform", t_eps: float = 1e-3,
              truncation: float = DEFAULT_TRUNCATION) -> float:
    batch = disc_batch(real, fake, spec, rng, weighting, t_eps)
    if isinstance(model, NetParams):
        d_real = forward_disc(model, batch.real_t, batch.t)
        d_fake = forward_disc(model, batch.fake_t, batch.t)
    else:
        d_real, d_fake = model(batch.real_t, batch.t), model(batch.fake_t, batch.t)
    return _bce(d_real, d_fake, batch, truncation)


def _disc_loss_and_grad(params: NetParams, batch: DiscBatch, truncation: float):
    n = batch.t.shape[0]
    x = np.concatenate([batch.real_t, batch.fake_t])
    tt = np.concatenate([batch.t, batch.t])
    out, cache = _forward(params, x, tt)
    z = out[:, 0]
    bound = logit_bound(truncation)
    zc = np.clip(z, -bound, bound)
    label = np.concatenate([np.ones(n), np.zeros(n)])
    w = np.concatenate([batch.weight, batch.weight])
    # -log sigmoid(z) for real, -log(1 - sigmoid(z)) for fake
    per = np.where(label == 1, np.logaddexp(0.0, -zc), np.logaddexp(0.0, zc))
    loss = batch.span * np.sum(w * per) / n
    dz = batch.span * w * (expit(zc) - label) / n
    dz = np.where(np.abs(z) < bound, dz, 0.0)
    grads, _ = _backward(params, cache, dz[:, None])
    return float(loss), grads


# -- optimisation -------------------------------------------------------------

class Adam:
    def __init__(self, tensors: Sequence[np.ndarray], lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in tensors]
        self.v = [np.zeros_like(p) for p in tensors]
        self.t = 0

    def step(self, tensors: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(tensors, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 512
    steps: int = 20000
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t_eps: float = 1e-3
    weighting: str = "likelihood"
    seed: int = 0
    truncation: float = DEFAULT_TRUNCATION
    hidden: tuple[int, ...] = (128, 128, 128)
    emb_dim: int = 32
    lr_decay: str = "cosine"

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not self.t_eps > 0:
            raise ValueError("t_eps must be > 0")
        if not 0 < self.truncation < 0.5:
            raise ValueError("truncation must lie in (0, 0.5)")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainResult:
    params: NetParams
    losses: np.ndarray = field(repr=False)


def draw(source: DataSource, n: int, rng: np.random.Generator) -> np.ndarray:
    """Fresh samples from a mixture, or rows resampled from a point cloud."""
    if isinstance(source, GaussianMixture):
        return source.sample(n, rng)
    pts = np.atleast_2d(np.asarray(source, dtype=float))
    return pts[rng.integers(0, pts.shape[0], size=n)]


def _source_dim(source: DataSource) -> int:
    return source.dim if isinstance(source, GaussianMixture) else np.atleast_2d(source).shape[1]


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_decay == "cosine" and cfg.steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.steps))
    return cfg.lr


def _run(params: NetParams, cfg: TrainConfig, rng: np.random.Generator, loss_and_grad) -> TrainResult:
    opt = Adam(params.tensors(), cfg.lr, cfg.b1, cfg.b2, cfg.eps)
    losses = np.empty(cfg.steps)
    tensors = params.tensors()
    for step in range(cfg.steps):
        loss, grads = loss_and_grad(rng)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingError(step)
        opt.step(tensors, grads, _lr_at(cfg, step))
        losses[step] = loss
        if step % 2000 == 0:
            log.debug("step %d loss %.5g", step, loss)
    return TrainResult(params, losses)


def train_score(cfg: TrainConfig, data: DataSource, spec: ScheduleSpec,
                init: NetParams | None = None) -> TrainResult:
    """Denoising score matching; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(
        _source_dim(data), "score", rng, cfg.hidden, cfg.emb_dim, spec.t_max)

    def step(rng):
        batch = dsm_batch(draw(data, cfg.batch_size, rng), spec, rng, cfg.weighting, cfg.t_eps)
        return _score_loss_and_grad(params, batch)

    return _run(params, cfg, rng, step)


def train_disc(cfg: TrainConfig, real: DataSource, fake: DataSource, spec: ScheduleSpec,
               init: NetParams | None = None) -> TrainResult:
    """Binary cross-entropy between perturbed real and (frozen) fake samples."""
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else init_params(
        _source_dim(real), "disc", rng, cfg.hidden, cfg.emb_dim, spec.t_max)

    def step(rng):
        batch = disc_batch(draw(real, cfg.batch_size, rng), draw(fake, cfg.batch_size, rng),
                           spec, rng, cfg.weighting, cfg.t_eps)
        return _disc_loss_and_grad(params, batch, cfg.truncation)

    return _run(params, cfg, rng, step)


# -- persistence --------------------------------------------------------------

def save_params(path: str | Path, params: NetParams) -> None:
    """Flat little-endian binary: magic, header, then float64 weights and biases."""
    header = struct.pack(
        f"<{len(_MAGIC)}sHBIII{len(params.hidden)}Id",
        _MAGIC, _VERSION, HEADS.index(params.head), params.data_dim, params.emb_dim,
        len(params.hidden), *params.hidden, params.t_max,
    )
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.tensors())
    Path(path).write_bytes(header + body)


def load_params(path: str | Path) -> NetParams:
    raw = Path(path).read_bytes()
    fixed = struct.Struct(f"<{len(_MAGIC)}sHBIII")
    if len(raw) < fixed.size:
        raise ParamsLoadError(f"{path}: truncated header")
    magic, version, head, data_dim, emb_dim, n_hidden = fixed.unpack_from(raw)
    if magic != _MAGIC:
        raise ParamsLoadError(f"{path}: bad magic bytes")
    if version != _VERSION:
        raise ParamsLoadError(f"{path}: unsupported version {version}")
    if head >= len(HEADS) or n_hidden > 64:
        raise ParamsLoadError(f"{path}: corrupt header")
    rest = struct.Struct(f"<{n_hidden}Id")
    if len(raw) < fixed.size + rest.size:
        raise ParamsLoadError(f"{path}: truncated header")
    *hidden, t_max = rest.unpack_from(raw, fixed.size)
    sizes = layer_sizes(data_dim, hidden, emb_dim, HEADS[head])
    shapes = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])] + [(b,) for b in sizes[1:]]
    expected = sum(math.prod(s) for s in shapes) * 8
    offset = fixed.size + rest.size
    if len(raw) - offset != expected:
        raise ParamsLoadError(f"{path}: expected {expected} payload bytes, found {len(raw) - offset}")
    arrays = []
    for shape in shapes:
        count = math.prod(shape)
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float))
        offset += count * 8
    n_layers = len(sizes) - 1
    return NetParams(HEADS[head], data_dim, tuple(hidden), emb_dim, t_max,
                     arrays[:n_layers], arrays[n_layers:])


def write_loss_csv(path: str | Path, losses: np.ndarray) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, format(float(v), ".17g")])

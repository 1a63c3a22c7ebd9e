"""Generative processes: reverse SDE, probability-flow ODE, churn sampler,
discriminator guidance and rejection.

Score and guidance sources are plain callables ``f(x, t) -> (n, D)`` taking a
batch of states and a scalar time, so trained networks and analytic oracles
are interchangeable. Time runs backwards along a strictly decreasing grid
``t_N > ... > t_0 = t_eps``.

Randomness: chain ``k`` of a run with base seed ``s`` draws all of its noise
from its own generator seeded by ``(s, k)``, so results do not depend on how
chains are batched and guided/unguided runs with one seed share noise.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import analytic_oracle as ao
from .diffusion_sde import (
    DomainError,
    ScheduleSpec,
    kernel_coeffs,
    noise_level,
    schedule_eval,
    time_of_noise_level,
)
from .tiny_nets import DEFAULT_TRUNCATION, NetParams, forward_disc, forward_score, logit_input_grad, truncate

SOLVERS = ("euler_maruyama", "pf_ode_heun", "churn_alg1")
GUIDANCE = ("off", "discriminator", "oracle")
GRIDS = ("rho", "uniform")

ScoreFn = Callable[[np.ndarray, float], np.ndarray]
GuidanceFn = Callable[[np.ndarray, float], np.ndarray]
DiscFn = Callable[[np.ndarray, float], np.ndarray]


class SamplerUsageError(ValueError):
    pass


class RejectionStarvation(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    solver: str = "churn_alg1"
    nfe: int = 35
    grid: str = "rho"
    grid_rho: float = 7.0
    t_eps: float = 1e-3
    churn: float = 0.0
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.0
    guidance: str = "off"
    guidance_weight: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.guidance not in GUIDANCE:
            raise ValueError(f"unknown guidance {self.guidance!r}; expected one of {GUIDANCE}")
        if self.grid not in GRIDS:
            raise ValueError(f"unknown grid {self.grid!r}")
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if self.churn < 0:
            raise ValueError("churn must be >= 0")
        if not self.s_noise > 0:
            raise ValueError("s_noise must be > 0")
        if not self.t_eps >= 0:
            raise ValueError("t_eps must be >= 0")

    @property
    def n_steps(self) -> int:
        """Grid intervals; Heun spends up to two evaluations per interval."""
        return (self.nfe + 1) // 2 if self.solver == "pf_ode_heun" else self.nfe


class Trajectory(NamedTuple):
    chain_id: int
    t: np.ndarray
    states: np.ndarray
    log_ratio: Optional[np.ndarray] = None


@dataclass
class SampleBatch:
    """Final states of ``n`` chains plus optional trajectories and acceptance mask.

    Trajectories are stored densely: ``traj_t`` has shape (S,) and
    ``traj_x`` shape (S, n, D).
    """

    points: np.ndarray
    chain_ids: np.ndarray
    traj_t: Optional[np.ndarray] = None
    traj_x: Optional[np.ndarray] = field(default=None, repr=False)
    accepted: Optional[np.ndarray] = None
    nfe_used: int = 0

    def __post_init__(self):
        if self.accepted is not None and len(self.accepted) != len(self.points):
            raise ValueError("acceptance mask length must equal number of points")

    def trajectories(self) -> list[Trajectory]:
        if self.traj_x is None:
            return []
        return [Trajectory(int(c), self.traj_t, self.traj_x[:, j]) for j, c in enumerate(self.chain_ids)]

    def accepted_points(self) -> np.ndarray:
        return self.points if self.accepted is None else self.points[self.accepted]


# -- time grids -----------------------------------------------------------------

def make_time_grid(spec: ScheduleSpec, n_steps: int, t_eps: float = 1e-3, kind: str = "rho",
                   rho: float = 7.0) -> np.ndarray:
    """Strictly decreasing grid from ``t_max`` down to ``t_eps``.

    ``rho`` spaces the perturbation levels as ``(s_hi^(1/rho) + u (s_lo^(1/rho) - s_hi^(1/rho)))^rho``
    and maps them back to time; ``uniform`` is linear in time.
    """
    if n_steps < 1:
        raise ValueError("need at least one step")
    if not 0 <= t_eps < spec.t_max:
        raise ValueError("t_eps must lie in [0, t_max)")
    u = np.linspace(0.0, 1.0, n_steps + 1)
    if kind == "uniform":
        grid = spec.t_max + u * (t_eps - spec.t_max)
    elif kind == "rho":
        hi = float(noise_level(spec, spec.t_max))
        lo = float(noise_level(spec, t_eps))
        sig = (hi ** (1 / rho) + u * (lo ** (1 / rho) - hi ** (1 / rho))) ** rho
        grid = np.array([time_of_noise_level(spec, float(min(max(s, lo), hi))) for s in sig])
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    grid[0], grid[-1] = spec.t_max, t_eps
    if np.any(np.diff(grid) >= 0):
        raise ValueError("time grid is not strictly decreasing; use fewer steps or a uniform grid")
    return grid


def refine_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    """Split every interval into ``factor`` equal sub-intervals."""
    parts = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(grid[:-1], grid[1:])]
    return np.concatenate([*parts, grid[-1:]])


def prior_std(spec: ScheduleSpec) -> float:
    """N(0, I) for VP; N(0, sigma(t_max)^2 I) for VE."""
    return 1.0 if spec.is_vp else float(kernel_coeffs(spec, spec.t_max).std)


# -- drifts ---------------------------------------------------------------------

def generative_drift(x, t: float, score_fn: ScoreFn, spec: ScheduleSpec) -> np.ndarray:
    """``-1/2 beta_t x - g_t^2 s(x, t)``, integrated with decreasing t."""
    vals = schedule_eval(spec, t)
    return -0.5 * float(vals.beta) * x - float(vals.g) ** 2 * score_fn(x, t)


def guided_drift(x, t: float, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn], weight: float,
                 spec: ScheduleSpec) -> np.ndarray:
    """``-1/2 beta_t x - g_t^2 (s(x, t) + weight * guidance(x, t))``."""
    if guidance_fn is None:
        return generative_drift(x, t, score_fn, spec)
    vals = schedule_eval(spec, t)
    return -0.5 * float(vals.beta) * x - float(vals.g) ** 2 * (score_fn(x, t) + weight * guidance_fn(x, t))


def reverse_drift(x, t: float, data_score_fn: ScoreFn, spec: ScheduleSpec) -> np.ndarray:
    """Drift of the exact time reversal, given the true perturbed-data score."""
    return generative_drift(x, t, data_score_fn, spec)


def pf_ode_drift(x, t: float, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn], weight: float,
                 spec: ScheduleSpec):
    """Probability-flow drift split as ``(d, a)``: score part and guidance part.

    ``a`` is ``None`` when guidance is off.
    """
    vals = schedule_eval(spec, t)
    half_g2 = 0.5 * float(vals.g) ** 2
    d = -0.5 * float(vals.beta) * x - half_g2 * score_fn(x, t)
    a = None if guidance_fn is None else -half_g2 * (weight * guidance_fn(x, t))
    return d, a


# -- guidance sources -----------------------------------------------------------

def guidance_from_discriminator(params: NetParams, x, t, truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """``grad_x log(d / (1 - d))`` by backprop to the input (truncated d)."""
    return logit_input_grad(params, x, t, truncation)


def discriminator_guidance(params: NetParams, truncation: float = DEFAULT_TRUNCATION) -> GuidanceFn:
    return lambda x, t: guidance_from_discriminator(params, x, t, truncation)


def network_score(params: NetParams, bias=0.0) -> ScoreFn:
    """Score callable from a trained network, optionally corrupted by a constant."""
    bias = np.asarray(bias, dtype=float)
    if not np.any(bias):
        return lambda x, t: forward_score(params, x, t)
    return lambda x, t: forward_score(params, x, t) + bias


def oracle_score(gmm: ao.GaussianMixture, spec: ScheduleSpec, bias=0.0) -> ScoreFn:
    """Exact score of the perturbed mixture (plus an optional constant bias)."""
    bias = np.asarray(bias, dtype=float)
    return lambda x, t: ao.score(ao.perturbed_mixture(gmm, spec, t), x) + bias


class RatioOracle(NamedTuple):
    """Pair of time-indexed mixtures ``(p_t, q_t)`` defining an exact ratio."""

    p_at: Callable[[float], ao.GaussianMixture]
    q_at: Callable[[float], ao.GaussianMixture]

    def guidance(self) -> GuidanceFn:
        return lambda x, t: ao.grad_log_ratio(self.p_at(t), self.q_at(t), x)

    def discriminator(self) -> DiscFn:
        return lambda x, t: ao.optimal_discriminator(self.p_at(t), self.q_at(t), x)

    def log_ratio(self, x, t) -> np.ndarray:
        return ao.log_ratio(self.p_at(t), self.q_at(t), x)


def biased_model_oracle(gmm: ao.GaussianMixture, spec: ScheduleSpec, bias) -> RatioOracle:
    """Ratio between the perturbed data and the density whose score is data score + bias.

    ``q_t`` is the exponential tilt of ``p_t``; with this pair,
    ``s_theta + grad log(p_t / q_t)`` is exactly the data score.
    """
    return RatioOracle(lambda t: ao.perturbed_mixture(gmm, spec, t),
                       lambda t: ao.tilted_mixture(ao.perturbed_mixture(gmm, spec, t), bias))


def diffused_model_oracle(gmm: ao.GaussianMixture, model: ao.GaussianMixture, spec: ScheduleSpec) -> RatioOracle:
    """Ratio between data and a model distribution, both pushed through the forward kernel."""
    return RatioOracle(lambda t: ao.perturbed_mixture(gmm, spec, t),
                       lambda t: ao.perturbed_mixture(model, spec, t))


def disc_probability(params: NetParams, truncation: float = DEFAULT_TRUNCATION) -> DiscFn:
    return lambda x, t: truncate(forward_disc(params, x, t), truncation)


# -- single steps ---------------------------------------------------------------

def em_step(x, t_from: float, t_to: float, drift_fn: Callable[[np.ndarray, float], np.ndarray],
            spec: ScheduleSpec, noise) -> np.ndarray:
    """Euler-Maruyama step backwards in time."""
    if not t_to < t_from:
        raise SamplerUsageError(f"em_step needs t_to < t_from, got {t_from} -> {t_to}")
    g = float(schedule_eval(spec, t_from).g)
    return x + (t_to - t_from) * drift_fn(x, t_from) + g * math.sqrt(t_from - t_to) * noise


def churn_gamma(cfg: SamplerConfig, spec: ScheduleSpec, t_i: float, n_steps: int) -> float:
    """Per-step churn: ``min(churn / N, sqrt 2 - 1)`` inside ``[s_tmin, s_tmax]``,
    capped so that the raised time stays within the horizon."""
    if cfg.churn <= 0 or t_i <= 0:
        return 0.0
    sig = float(noise_level(spec, t_i))
    if not cfg.s_tmin <= sig <= cfg.s_tmax:
        return 0.0
    return min(cfg.churn / n_steps, math.sqrt(2.0) - 1.0, spec.t_max / t_i - 1.0)


def _churn(x, t_i: float, gamma: float, spec: ScheduleSpec, noise, s_noise: float):
    """Lines 3-5: raise time to ``t_i (1 + gamma)`` and add matching noise.

    Noise follows the forward kernel from ``t_i`` to ``t_hat``; when ``sigma(t) = t``
    this is exactly ``sqrt(t_hat^2 - t_i^2) * eps``.
    """
    if gamma < 0:
        raise DomainError("churn gamma must be >= 0")
    if gamma == 0:
        return x, t_i
    t_hat = t_i + gamma * t_i
    k_i, k_hat = kernel_coeffs(spec, t_i), kernel_coeffs(spec, t_hat)
    ratio = float(k_hat.mean_scale / k_i.mean_scale)
    var = float(k_hat.std) ** 2 - (ratio * float(k_i.std)) ** 2
    return ratio * x + math.sqrt(max(var, 0.0)) * (s_noise * noise), t_hat


def churn_step(x, i: int, grid: np.ndarray, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn],
               spec: ScheduleSpec, noise, gamma: float = 0.0, s_noise: float = 1.0,
               weight: float = 1.0, heun: bool = False) -> np.ndarray:
    """One iteration of the churn sampler, moving from ``grid[i]`` to ``grid[i + 1]``.

    ``grid`` is stored in decreasing order, so ``grid[i]`` plays the role of
    ``t_i`` and ``grid[i + 1]`` that of ``t_{i-1}``. With ``heun=True`` a second
    evaluation at the end point averages the slopes.
    """
    if not 0 <= i < len(grid) - 1:
        raise SamplerUsageError(f"step index {i} outside grid of {len(grid)} points")
    t_i, t_next = float(grid[i]), float(grid[i + 1])
    if not t_next < t_i:
        raise SamplerUsageError("time grid must be strictly decreasing")
    x_hat, t_hat = _churn(x, t_i, gamma, spec, noise, s_noise)
    d, a = pf_ode_drift(x_hat, t_hat, score_fn, guidance_fn, weight, spec)
    slope = d if a is None else d + a
    x_next = x_hat + (t_next - t_hat) * slope
    if heun:
        d2, a2 = pf_ode_drift(x_next, t_next, score_fn, guidance_fn, weight, spec)
        slope2 = d2 if a2 is None else d2 + a2
        x_next = x_hat + (t_next - t_hat) * (0.5 * slope + 0.5 * slope2)
    return x_next


# -- full sampler ---------------------------------------------------------------

def chain_noise(seed: int, chain_ids: np.ndarray, n_draws: int, dim: int) -> np.ndarray:
    """(n_draws, n_chains, dim) standard normals; chain k uses generator (seed, k)."""
    out = np.empty((n_draws, len(chain_ids), dim))
    for j, cid in enumerate(chain_ids):
        out[:, j, :] = np.random.default_rng([int(seed), int(cid)]).standard_normal((n_draws, dim))
    return out


class _Counter:
    def __init__(self, fn: ScoreFn):
        self.fn, self.calls = fn, 0

    def __call__(self, x, t):
        self.calls += 1
        return self.fn(x, t)


def sample(cfg: SamplerConfig, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn], n: int,
           spec: ScheduleSpec, *, dim: int = 1, record: bool = False, chain_offset: int = 0,
           grid: Optional[np.ndarray] = None, noise: Optional[np.ndarray] = None) -> SampleBatch:
    """Run ``n`` chains from the prior to ``t_eps``.

    ``cfg.guidance == "off"`` ignores ``guidance_fn``. ``grid``/``noise`` override
    the default grid and the per-chain noise draws (``noise`` has shape
    (1 + n_steps, n, dim): prior draw then one draw per step).
    """
    if n < 1:
        raise SamplerUsageError("need at least one chain")
    if cfg.guidance != "off" and guidance_fn is None:
        raise SamplerUsageError(f"guidance={cfg.guidance!r} requires a guidance function")
    gfn = guidance_fn if cfg.guidance != "off" else None
    if grid is None:
        grid = make_time_grid(spec, cfg.n_steps, cfg.t_eps, cfg.grid, cfg.grid_rho)
    n_steps = len(grid) - 1
    chain_ids = np.arange(chain_offset, chain_offset + n)
    if noise is None:
        noise = chain_noise(cfg.seed, chain_ids, 1 + n_steps, dim)
    if noise.shape != (1 + n_steps, n, dim):
        raise SamplerUsageError(f"noise must have shape {(1 + n_steps, n, dim)}, got {noise.shape}")

    counted = _Counter(score_fn)
    x = prior_std(spec) * noise[0]
    traj = [x] if record else None
    heun_budget = cfg.nfe - n_steps if cfg.solver == "pf_ode_heun" else 0
    for i in range(n_steps):
        t_from, t_to = float(grid[i]), float(grid[i + 1])
        if cfg.solver == "euler_maruyama":
            drift = lambda y, t: guided_drift(y, t, counted, gfn, cfg.guidance_weight, spec)  # noqa: E731
            x = em_step(x, t_from, t_to, drift, spec, noise[1 + i])
        else:
            gamma = churn_gamma(cfg, spec, t_from, n_steps)
            heun = cfg.solver == "pf_ode_heun" and i < heun_budget
            x = churn_step(x, i, grid, counted, gfn, spec, noise[1 + i], gamma, cfg.s_noise,
                           cfg.guidance_weight, heun=heun)
        if record:
            traj.append(x)
    return SampleBatch(
        points=x,
        chain_ids=chain_ids,
        traj_t=np.asarray(grid, dtype=float).copy() if record else None,
        traj_x=np.stack(traj) if record else None,
        nfe_used=counted.calls,
    )


def brownian_coarsen(fine_noise: np.ndarray, fine_grid: np.ndarray, factor: int) -> np.ndarray:
    """Coarse unit increments that share the Brownian path of a refined run."""
    dt = -np.diff(fine_grid)
    steps = fine_noise[1:] * np.sqrt(dt)[:, None, None]
    n_coarse = steps.shape[0] // factor
    summed = steps.reshape(n_coarse, factor, *steps.shape[1:]).sum(axis=1)
    coarse_dt = dt.reshape(n_coarse, factor).sum(axis=1)
    return np.concatenate([fine_noise[:1], summed / np.sqrt(coarse_dt)[:, None, None]])


# -- rejection ------------------------------------------------------------------

class RejectionResult(NamedTuple):
    batch: SampleBatch
    alpha: float
    attempted: int
    accepted: int


def rejection_sample(cfg: SamplerConfig, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn],
                     disc, n_accept: int, spec: ScheduleSpec, *, dim: int = 1,
                     threshold: float = 0.5, batch_size: Optional[int] = None,
                     truncation: float = DEFAULT_TRUNCATION, max_attempts: int = 10_000_000) -> RejectionResult:
    """Keep final samples with ``d(x, t_eps) >= threshold`` until ``n_accept`` are kept.

    ``disc`` is a discriminator network or a callable returning probabilities.
    The acceptance rate counts every attempted chain, including the overshoot of
    the last batch.
    """
    if not 0 < threshold < 1:
        raise SamplerUsageError("threshold must lie in (0, 1)")
    if n_accept < 1:
        raise SamplerUsageError("n_accept must be >= 1")
    d_fn = disc_probability(disc, truncation) if isinstance(disc, NetParams) else disc
    batch_size = batch_size or max(256, n_accept)
    points, masks = [], []
    attempted = accepted = 0
    while accepted < n_accept:
        b = sample(cfg, score_fn, guidance_fn, batch_size, spec, dim=dim, chain_offset=attempted)
        d = np.asarray(d_fn(b.points, cfg.t_eps))
        mask = d >= threshold
        points.append(b.points)
        masks.append(mask)
        attempted += batch_size
        accepted += int(mask.sum())
        if attempted >= 10_000 and accepted / attempted < 0.01:
            raise RejectionStarvation(f"acceptance rate {accepted / attempted:.4f} after {attempted} attempts")
        if attempted >= max_attempts:
            raise RejectionStarvation(f"only {accepted} accepted after {attempted} attempts")
    pts = np.concatenate(points)
    mask = np.concatenate(masks)
    batch = SampleBatch(points=pts, chain_ids=np.arange(attempted), accepted=mask, nfe_used=0)
    return RejectionResult(batch, accepted / attempted, attempted, accepted)


# -- export ---------------------------------------------------------------------

def write_trajectories_csv(path: str | Path, batch: SampleBatch, spec: ScheduleSpec,
                           log_ratio: Optional[np.ndarray] = None) -> None:
    """Rows ``chain_id, step, t, sigma, x_0..x_{D-1}[, log_ratio]``."""
    if batch.traj_x is None:
        raise SamplerUsageError("batch carries no trajectories")
    n_rec, n, dim = batch.traj_x.shape
    sig = noise_level(spec, batch.traj_t)
    header = ["chain_id", "step", "t", "sigma", *[f"x_{d}" for d in range(dim)]]
    if log_ratio is not None:
        header.append("log_ratio")
    fmt = lambda v: format(float(v), ".17g")  # noqa: E731
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for j in range(n):
            for k in range(n_rec):
                row = [int(batch.chain_ids[j]), k, fmt(batch.traj_t[k]), fmt(sig[k]),
                       *[fmt(v) for v in batch.traj_x[k, j]]]
                if log_ratio is not None:
                    row.append(fmt(log_ratio[k, j]))
                w.writerow(row)


def with_guidance(cfg: SamplerConfig, guidance: str) -> SamplerConfig:
    return replace(cfg, guidance=guidance)

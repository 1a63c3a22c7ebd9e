"""Sample-quality diagnostics: Wasserstein-1 distances, the prior/score/solver
error breakdown, log-density-ratio traces along trajectories, and NFE sweeps.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from . import analytic_oracle as ao
from .diffusion_sde import ScheduleSpec, noise_level, perturb
from .samplers import (
    GuidanceFn,
    RatioOracle,
    SampleBatch,
    SamplerConfig,
    ScoreFn,
    brownian_coarsen,
    chain_noise,
    make_time_grid,
    prior_std,
    refine_grid,
    sample,
)
from .tiny_nets import DEFAULT_TRUNCATION, NetParams, log_odds, logit_bound, loss_weight


class DiagnosticsError(ValueError):
    pass


# -- Wasserstein distances ----------------------------------------------------------

def _as_1d(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 1:
        raise DiagnosticsError(f"expected one-dimensional samples, got shape {a.shape}")
    if a.size == 0:
        raise DiagnosticsError("empty sample set")
    return a


def w1_exact_1d(a, b) -> float:
    """Exact W1 between two empirical measures on the line.

    Equal sizes pair sorted samples; otherwise the quantile functions are
    integrated exactly over the merged breakpoints.
    """
    a, b = np.sort(_as_1d(a)), np.sort(_as_1d(b))
    n, m = a.size, b.size
    if n == m:
        return float(np.mean(np.abs(a - b)))
    u = np.union1d(np.arange(n + 1) / n, np.arange(m + 1) / m)
    mid = 0.5 * (u[:-1] + u[1:])
    qa = a[np.minimum((mid * n).astype(int), n - 1)]
    qb = b[np.minimum((mid * m).astype(int), m - 1)]
    return float(np.sum(np.abs(qa - qb) * np.diff(u)))


def random_directions(n_proj: int, dim: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((n_proj, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def w1_sliced(a, b, n_proj: int = 128, seed: int = 0) -> float:
    """Average 1-D W1 over random unit projections."""
    a, b = np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DiagnosticsError("empty sample set")
    if a.shape[1] != b.shape[1] or a.shape[1] < 2:
        raise DiagnosticsError("sliced W1 needs equal dimensions >= 2")
    dirs = random_directions(n_proj, a.shape[1], seed)
    return float(np.mean([w1_exact_1d(a @ u, b @ u) for u in dirs]))


def mixture_cdf_1d(gmm: ao.GaussianMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    z = (x[..., None] - gmm.means[:, 0]) / np.sqrt(gmm.variances[:, 0])
    return ndtr(z) @ gmm.weights


def w1_to_mixture_1d(samples, gmm: ao.GaussianMixture, n_grid: int = 200_001) -> float:
    """W1 between an empirical measure and a 1-D mixture: ``int |F_n - F| dx``."""
    if gmm.dim != 1:
        raise DiagnosticsError("w1_to_mixture_1d needs a 1-D mixture")
    s = np.sort(_as_1d(samples))
    sd = np.sqrt(gmm.variances[:, 0]).max()
    lo = min(s[0], gmm.means[:, 0].min() - 12 * sd)
    hi = max(s[-1], gmm.means[:, 0].max() + 12 * sd)
    x = np.linspace(lo, hi, n_grid)
    fn = np.searchsorted(s, x, side="right") / s.size
    return float(np.trapezoid(np.abs(fn - mixture_cdf_1d(gmm, x)), x))


def w1_mixtures_1d(p: ao.GaussianMixture, q: ao.GaussianMixture, n_grid: int = 200_001) -> float:
    sd = max(np.sqrt(p.variances).max(), np.sqrt(q.variances).max())
    lo = min(p.means.min(), q.means.min()) - 12 * sd
    hi = max(p.means.max(), q.means.max()) + 12 * sd
    x = np.linspace(lo, hi, n_grid)
    return float(np.trapezoid(np.abs(mixture_cdf_1d(p, x) - mixture_cdf_1d(q, x)), x))


def w1_to_data(samples, data: ao.GaussianMixture, seed: int = 0, n_ref: int = 20_000,
               n_proj: int = 128) -> float:
    """Endpoint quality: exact CDF distance in 1-D, sliced W1 against fresh data otherwise."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if data.dim == 1:
        return w1_to_mixture_1d(samples[:, 0], data)
    ref = data.sample(n_ref, np.random.default_rng(seed))
    return w1_sliced(samples, ref, n_proj, seed)


def w1_between(a, b, seed: int = 0, n_proj: int = 128) -> float:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 or a.shape[1] == 1:
        return w1_exact_1d(a, b)
    return w1_sliced(a, b, n_proj, seed)


# -- error decomposition ---------------------------------------------------------------

@dataclass(frozen=True)
class ErrorReport:
    e_pri: float
    e_est: float
    e_sol: float
    w1_total: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be >= 0, got {v}")

    def to_text(self) -> str:
        return "".join(f"{k}={format(v, '.17g')}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> ErrorReport:
        vals = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(**{k: float(v) for k, v in vals.items()})


def score_error(score_fn: ScoreFn, data: ao.GaussianMixture, spec: ScheduleSpec, *,
                weighting: str = "likelihood", t_eps: float = 1e-3, n_t: int = 64,
                n_per_t: int = 2000, seed: int = 0, relative: bool = False) -> float:
    """``(int lambda E||s - grad log p_t||^2 dt)^(1/2)`` on a uniform time grid.

    With ``relative=True`` the result is divided by the same weighted norm of
    the true score.
    """
    rng = np.random.default_rng(seed)
    ts = np.linspace(t_eps, spec.t_max, n_t)
    err = norm = 0.0
    for t in ts:
        p_t = ao.perturbed_mixture(data, spec, t)
        x = p_t.sample(n_per_t, rng)
        true = ao.score(p_t, x)
        lam = float(loss_weight(spec, t, weighting))
        err += lam * np.mean(((score_fn(x, t) - true) ** 2).sum(axis=1))
        norm += lam * np.mean((true**2).sum(axis=1))
    span = spec.t_max - t_eps
    if relative:
        return float(math.sqrt(err / norm))
    return float(math.sqrt(err * span / n_t))


def error_decomposition(spec: ScheduleSpec, score_fn: ScoreFn, cfg: SamplerConfig,
                        data: Optional[ao.GaussianMixture], *, guidance_fn: Optional[GuidanceFn] = None,
                        n: int = 4000, weighting: str = "likelihood", refine: int = 4) -> ErrorReport:
    """Prior mismatch, score error, solver error and total endpoint W1.

    ``e_sol`` compares runs on a grid and on its ``refine``-fold subdivision
    driven by the same Brownian path.
    """
    if data is None:
        raise ao.UnsupportedError("error decomposition needs an analytic data distribution")
    p_T = ao.perturbed_mixture(data, spec, spec.t_max)
    prior = ao.GaussianMixture(np.ones(1), np.zeros((1, data.dim)), np.full((1, data.dim), prior_std(spec) ** 2))
    if data.dim == 1:
        e_pri = w1_mixtures_1d(p_T, prior)
    else:
        rng = np.random.default_rng(cfg.seed)
        e_pri = w1_sliced(p_T.sample(n, rng), prior.sample(n, rng), seed=cfg.seed)

    e_est = score_error(score_fn, data, spec, weighting=weighting, t_eps=cfg.t_eps, seed=cfg.seed)

    coarse_grid = make_time_grid(spec, cfg.n_steps, cfg.t_eps, cfg.grid, cfg.grid_rho)
    fine_grid = refine_grid(coarse_grid, refine)
    if cfg.solver == "pf_ode_heun":
        fine_nfe = 2 * refine * cfg.n_steps - cfg.nfe % 2
    else:
        fine_nfe = cfg.nfe * refine
    fine_cfg = replace(cfg, nfe=fine_nfe)
    ids = np.arange(n)
    fine_noise = chain_noise(cfg.seed, ids, len(fine_grid), data.dim)
    coarse_noise = brownian_coarsen(fine_noise, fine_grid, refine)
    coarse = sample(cfg, score_fn, guidance_fn, n, spec, dim=data.dim, grid=coarse_grid, noise=coarse_noise)
    fine = sample(fine_cfg, score_fn, guidance_fn, n, spec, dim=data.dim, grid=fine_grid, noise=fine_noise)
    e_sol = w1_between(coarse.points, fine.points, seed=cfg.seed)

    w1_total = w1_to_data(coarse.points, data, seed=cfg.seed)
    return ErrorReport(float(e_pri), float(e_est), float(e_sol), float(w1_total))


# -- log-ratio traces ---------------------------------------------------------------

RatioSource = Union[NetParams, RatioOracle]


@dataclass
class RatioTrace:
    """Per-bin statistics of ``log(d / (1 - d))`` over ``log sigma`` bins."""

    label: str
    log_sigma_edges: np.ndarray
    count: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    q10: np.ndarray
    q90: np.ndarray

    @property
    def log_sigma_centers(self) -> np.ndarray:
        return 0.5 * (self.log_sigma_edges[:-1] + self.log_sigma_edges[1:])

    def to_rows(self) -> list[list]:
        rows = []
        for i, c in enumerate(self.log_sigma_centers):
            rows.append([self.label, c, int(self.count[i]), self.mean[i], self.median[i], self.q10[i], self.q90[i]])
        return rows


def evaluate_log_ratio(ratio: RatioSource, x, t: float, truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """Truncated log-ratio from a discriminator, or the clipped exact log-ratio."""
    if isinstance(ratio, NetParams):
        return log_odds(ratio, x, t, truncation)
    bound = logit_bound(truncation)
    return np.clip(ratio.log_ratio(x, t), -bound, bound)


def sigma_bins(spec: ScheduleSpec, t_eps: float, n_bins: int = 64) -> np.ndarray:
    lo = math.log(float(noise_level(spec, t_eps)))
    hi = math.log(float(noise_level(spec, spec.t_max)))
    return np.linspace(lo, hi, n_bins + 1)


def _aggregate(label: str, times: np.ndarray, values: np.ndarray, spec: ScheduleSpec, edges: np.ndarray) -> RatioTrace:
    log_sig = np.log(noise_level(spec, times))
    idx = np.clip(np.searchsorted(edges, log_sig, side="right") - 1, 0, len(edges) - 2)
    n_bins = len(edges) - 1
    stats = {k: np.full(n_bins, np.nan) for k in ("mean", "median", "q10", "q90")}
    count = np.zeros(n_bins, dtype=int)
    for b in range(n_bins):
        vals = values[idx == b].ravel()
        if vals.size == 0:
            continue
        count[b] = vals.size
        stats["mean"][b] = vals.mean()
        stats["median"][b] = np.median(vals)
        stats["q10"][b], stats["q90"][b] = np.quantile(vals, [0.1, 0.9])
    return RatioTrace(label, edges, count, **stats)


def trajectory_log_ratios(batch: SampleBatch, ratio: RatioSource,
                          truncation: float = DEFAULT_TRUNCATION) -> np.ndarray:
    """(S, n) log-ratio at every recorded state."""
    if batch.traj_x is None or batch.traj_x.shape[1] == 0:
        raise DiagnosticsError("no trajectories to trace")
    return np.stack([evaluate_log_ratio(ratio, batch.traj_x[k], float(t), truncation)
                     for k, t in enumerate(batch.traj_t)])


def trace_log_ratio(batch: SampleBatch, ratio: RatioSource, spec: ScheduleSpec, *, label: str = "unguided",
                    t_eps: Optional[float] = None, n_bins: int = 64,
                    truncation: float = DEFAULT_TRUNCATION) -> RatioTrace:
    """Aggregate log-ratios along recorded trajectories by perturbation level."""
    values = trajectory_log_ratios(batch, ratio, truncation)
    t_eps = float(batch.traj_t[-1]) if t_eps is None else t_eps
    edges = sigma_bins(spec, t_eps, n_bins)
    return _aggregate(label, batch.traj_t, values, spec, edges)


def data_forward_trace(real: np.ndarray, times: np.ndarray, ratio: RatioSource, spec: ScheduleSpec, *,
                       seed: int = 0, t_eps: Optional[float] = None, n_bins: int = 64,
                       truncation: float = DEFAULT_TRUNCATION) -> RatioTrace:
    """Reference trace: real samples perturbed forward to each time in ``times``."""
    real = np.atleast_2d(np.asarray(real, dtype=float))
    if real.shape[0] == 0:
        raise DiagnosticsError("no real samples")
    rng = np.random.default_rng(seed)
    values = np.stack([
        evaluate_log_ratio(ratio, perturb(real, float(t), rng.standard_normal(real.shape), spec), float(t), truncation)
        for t in times
    ])
    t_eps = float(np.min(times)) if t_eps is None else t_eps
    edges = sigma_bins(spec, t_eps, n_bins)
    return _aggregate("data_forward", np.asarray(times), values, spec, edges)


def trace_gap(trace: RatioTrace, reference: RatioTrace, stat: str = "mean") -> float:
    """Integrated ``|trace - reference|`` over the log-sigma bins both populate."""
    a, b = getattr(trace, stat), getattr(reference, stat)
    both = ~np.isnan(a) & ~np.isnan(b)
    width = np.diff(trace.log_sigma_edges)
    return float(np.sum(np.abs(a - b)[both] * width[both]))


def write_traces_csv(path: str | Path, traces: Sequence[RatioTrace]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["process", "log_sigma", "count", "mean", "median", "q10", "q90"])
        for tr in traces:
            for row in tr.to_rows():
                w.writerow([row[0], *[format(float(v), ".17g") if not isinstance(v, int) else v for v in row[1:]]])


# -- NFE sweep --------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    nfe: int
    w1_unguided: float
    w1_guided: float


def nfe_sweep(spec: ScheduleSpec, score_fn: ScoreFn, guidance_fn: Optional[GuidanceFn], nfes: Sequence[int],
              n: int, seed: int, cfg: SamplerConfig, data: ao.GaussianMixture) -> list[SweepRow]:
    """Paired unguided/guided endpoint W1 at each NFE (same seed for both runs)."""
    if len(nfes) == 0:
        raise DiagnosticsError("empty NFE list")
    rows = []
    for nfe in nfes:
        base = replace(cfg, nfe=int(nfe), seed=seed, guidance="off")
        un = sample(base, score_fn, None, n, spec, dim=data.dim)
        w_un = w1_to_data(un.points, data, seed=seed)
        if guidance_fn is None:
            w_g = float("nan")
        else:
            gd = sample(replace(base, guidance="discriminator"), score_fn, guidance_fn, n, spec, dim=data.dim)
            w_g = w1_to_data(gd.points, data, seed=seed)
        rows.append(SweepRow(int(nfe), w_un, w_g))
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nfe", "w1_unguided", "w1_guided"])
        for r in rows:
            w.writerow([r.nfe, format(r.w1_unguided, ".17g"), format(r.w1_guided, ".17g")])

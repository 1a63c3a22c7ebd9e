"""Closed-form ground truth built on diagonal Gaussian mixtures.

Every quantity the learned components approximate has an exact counterpart
here: perturbed marginals, scores, density ratios, the Bayes-optimal
discriminator, and the moments of the linear generative SDE.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .diffusion_sde import ScheduleSpec, integrated_beta, kernel_coeffs

_LOG_2PI = math.log(2.0 * math.pi)


class UnsupportedError(ValueError):
    """Requested oracle does not exist for this configuration."""


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Weighted sum of diagonal Gaussians.

    ``weights`` has shape (K,), ``means`` and ``variances`` shape (K, D).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        if mu.ndim == 1:
            mu = mu[:, None]
        if var.ndim == 1:
            var = var[:, None]
        var = np.broadcast_to(var, mu.shape).copy()
        if w.ndim != 1 or mu.shape[0] != w.shape[0]:
            raise ValueError("weights and means disagree on the number of components")
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError(f"weights must be a probability vector (sum={w.sum()!r})")
        if np.any(~(var > 0)):
            raise ValueError("all variances must be > 0")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance_diag(self) -> np.ndarray:
        """Per-dimension marginal variance."""
        mu = self.mean()
        second = self.weights @ (self.variances + self.means**2)
        return second - mu**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps

    def allclose(self, other: GaussianMixture, atol: float = 1e-12) -> bool:
        return (
            self.weights.shape == other.weights.shape
            and self.means.shape == other.means.shape
            and np.allclose(self.weights, other.weights, rtol=0, atol=atol)
            and np.allclose(self.means, other.means, rtol=0, atol=atol)
            and np.allclose(self.variances, other.variances, rtol=0, atol=atol)
        )


class LinearSDEMoments(NamedTuple):
    mean: np.ndarray
    covariance: np.ndarray


def _as_points(gmm: GaussianMixture, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != gmm.dim:
        raise ValueError(f"expected points of dimension {gmm.dim}, got shape {x.shape}")
    return x, single


def _component_logpdf(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    # (n, K): log w_k + log N(x; mu_k, diag var_k)
    diff = x[:, None, :] - gmm.means[None]
    quad = (diff**2 / gmm.variances[None]).sum(-1)
    logdet = np.log(gmm.variances).sum(-1)
    return np.log(gmm.weights)[None] - 0.5 * (quad + logdet[None] + gmm.dim * _LOG_2PI)


def log_density(gmm: GaussianMixture, x) -> np.ndarray | float:
    x, single = _as_points(gmm, x)
    out = logsumexp(_component_logpdf(gmm, x), axis=1)
    return float(out[0]) if single else out


def score(gmm: GaussianMixture, x) -> np.ndarray:
    """``grad_x log p(x)``: responsibility-weighted ``(mu_k - x) / var_k``."""
    x, single = _as_points(gmm, x)
    logc = _component_logpdf(gmm, x)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    pull = (gmm.means[None] - x[:, None, :]) / gmm.variances[None]
    out = np.einsum("nk,nkd->nd", resp, pull)
    return out[0] if single else out


def perturbed_mixture(gmm: GaussianMixture, spec: ScheduleSpec, t: float) -> GaussianMixture:
    """Push ``gmm`` through the forward kernel at time ``t``."""
    k = kernel_coeffs(spec, float(t))
    m, s = float(k.mean_scale), float(k.std)
    return GaussianMixture(gmm.weights, m * gmm.means, m**2 * gmm.variances + s**2)


def tilted_mixture(gmm: GaussianMixture, c) -> GaussianMixture:
    """Exponential tilt ``p(x) exp(c . x) / Z``; its score is ``score(p) + c``."""
    c = np.broadcast_to(np.asarray(c, dtype=float), (gmm.dim,))
    means = gmm.means + gmm.variances * c
    logw = np.log(gmm.weights) + gmm.means @ c + 0.5 * (gmm.variances * c**2).sum(-1)
    w = np.exp(logw - logsumexp(logw))
    return GaussianMixture(w / w.sum(), means, gmm.variances)


def log_ratio(p: GaussianMixture, q: GaussianMixture, x) -> np.ndarray | float:
    return log_density(p, x) - log_density(q, x)


def optimal_discriminator(p: GaussianMixture, q: GaussianMixture, x) -> np.ndarray | float:
    """Bayes-optimal ``p / (p + q)`` as a sigmoid of the log-ratio.

    The smaller of the two class probabilities is formed as ``1 - sigmoid(|L|)``
    so that swapping ``p`` and ``q`` gives complements that sum to exactly 1.
    """
    lr = log_ratio(p, q, x)
    hi = expit(np.abs(lr))
    out = np.where(lr >= 0, hi, 1.0 - hi)
    return float(out) if np.ndim(lr) == 0 else out


def grad_log_ratio(p: GaussianMixture, q: GaussianMixture, x) -> np.ndarray:
    return score(p, x) - score(q, x)


def linear_sde_marginal(
    spec: ScheduleSpec, t: float, bias, init_mean, init_var
) -> LinearSDEMoments:
    """Exact marginal of the reverse-time generative SDE with score ``-x + bias``.

    Started at ``t_max`` from ``N(init_mean, init_var)`` and run backwards to
    ``t``. In reverse time the process is an Ornstein-Uhlenbeck process
    ``dx = (-1/2 beta x + beta c) dtau + sqrt(beta) dw`` whose moments solve

        mean(t) = 2c + (mean_T - 2c) exp(-1/2 B),  var(t) = 1 + (var_T - 1) exp(-B)

    with ``B = int_t^T beta``.
    """
    if not spec.is_vp:
        raise UnsupportedError("linear_sde_marginal is defined for VP schedules only")
    c = np.asarray(bias, dtype=float)
    mu_T = np.asarray(init_mean, dtype=float)
    var_T = np.asarray(init_var, dtype=float)
    big_b = float(integrated_beta(spec, spec.t_max) - integrated_beta(spec, t))
    mean = 2.0 * c + (mu_T - 2.0 * c) * math.exp(-0.5 * big_b)
    var = 1.0 + (var_T - 1.0) * math.exp(-big_b)
    mean, var = np.broadcast_arrays(mean, var)
    return LinearSDEMoments(np.array(mean, dtype=float), np.array(var, dtype=float))


def gaussian_from_moments(moments: LinearSDEMoments) -> GaussianMixture:
    mean = np.atleast_1d(moments.mean)
    return GaussianMixture(np.ones(1), mean[None], np.atleast_1d(moments.covariance)[None])


# -- named datasets and point clouds -----------------------------------------

def bimodal_1d() -> GaussianMixture:
    return GaussianMixture(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]), np.full((2, 1), 0.25))


def ring_8(radius: float = 4.0, variance: float = 0.09) -> GaussianMixture:
    angles = 2.0 * np.pi * np.arange(8) / 8
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.full(8, 1.0 / 8), means, np.full((8, 2), variance))


DATASETS = {"bimodal-1d": bimodal_1d, "ring-8": ring_8}


def get_dataset(name: str) -> GaussianMixture:
    try:
        return DATASETS[name]()
    except KeyError:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(DATASETS)}") from None


def load_point_cloud(path: str | Path) -> np.ndarray:
    """Read one point per row; a non-numeric first line is treated as a header."""
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    pts = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2, comments="#")
    if pts.size == 0:
        raise ValueError(f"{path}: no points")
    return pts


def save_point_cloud(path: str | Path, points: np.ndarray) -> None:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    header = ",".join(f"x_{i}" for i in range(points.shape[1]))
    np.savetxt(path, points, delimiter=",", header=header, comments="", fmt="%.17g")

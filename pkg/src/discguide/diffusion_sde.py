"""Forward diffusion processes.

Schedules are indexed by a continuous time ``t`` in ``[0, t_max]``. The
perturbation kernel is always ``x_t = m_t * x_0 + s_t * eps``:

* VP families (``LVP``, ``CVP``): ``dx = -1/2 beta_t x dt + sqrt(beta_t) dw``,
  ``m_t = exp(-1/2 int_0^t beta)`` and ``s_t^2 = 1 - m_t^2``.
* VE families (``GVE``, ``WVE_paper``, ``WVE_edm``): ``dx = g_t dw`` with
  ``g_t^2 = d sigma_t^2 / dt``, ``m_t = 1`` and ``s_t = sigma_t``.

For VP schedules the reported noise level ``sigma`` is the noise-to-signal
ratio ``s_t / m_t`` so that every family shares one "perturbation level" axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

VP_FAMILIES = ("LVP", "CVP")
VE_FAMILIES = ("GVE", "WVE_paper", "WVE_edm")
FAMILIES = VP_FAMILIES + VE_FAMILIES

# composite Simpson intervals for the CVP integral of beta
_SIMPSON_INTERVALS = 256


class DomainError(ValueError):
    """Raised when a time or rate lies outside the admissible range."""


@dataclass(frozen=True)
class ScheduleSpec:
    family: str = "LVP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    rho: float = 7.0
    t_max: float = 1.0
    cosine_s: float = 0.008

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}; expected one of {FAMILIES}")
        if not self.beta_min < self.beta_max:
            raise ValueError("beta_min must be < beta_max")
        if self.beta_min < 0:
            raise ValueError("beta_min must be >= 0")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.t_max > 0:
            raise ValueError("t_max must be > 0")
        if not self.cosine_s > 0:
            raise ValueError("cosine_s must be > 0")

    @property
    def is_vp(self) -> bool:
        return self.family in VP_FAMILIES

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ScheduleValues(NamedTuple):
    beta: np.ndarray
    g: np.ndarray
    sigma: np.ndarray


class KernelCoeffs(NamedTuple):
    mean_scale: np.ndarray
    std: np.ndarray


def _check_time(spec: ScheduleSpec, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > spec.t_max):
        raise DomainError(f"t must lie in [0, {spec.t_max}], got {t}")
    return t


def _wve_base(spec: ScheduleSpec, t):
    a = spec.sigma_min ** (1.0 / spec.rho)
    b = spec.sigma_max ** (1.0 / spec.rho)
    return a + t * (b - a), b - a


def _cvp_beta(spec: ScheduleSpec, t):
    s = spec.cosine_s
    phase = (t / spec.t_max + s) / (1.0 + s) * (math.pi / 2)
    with np.errstate(over="ignore", divide="ignore"):
        raw = math.pi / (spec.t_max * (1.0 + s)) * np.tan(phase)
    # tan diverges at t_max; beta_max caps the rate
    return np.minimum(raw, spec.beta_max)


def _cvp_cap_time(spec: ScheduleSpec) -> float:
    """Time at which the cosine rate reaches ``beta_max``."""
    s = spec.cosine_s
    phase = math.atan(spec.beta_max * spec.t_max * (1.0 + s) / math.pi)
    return min(spec.t_max, max(0.0, spec.t_max * (phase * 2.0 / math.pi * (1.0 + s) - s)))


def _beta(spec: ScheduleSpec, t):
    if spec.family == "LVP":
        return spec.beta_min + t * (spec.beta_max - spec.beta_min)
    if spec.family == "CVP":
        return _cvp_beta(spec, t)
    return np.zeros_like(t)


def integrated_beta(spec: ScheduleSpec, t) -> np.ndarray:
    """``int_0^t beta_s ds`` (closed form for LVP, Simpson quadrature for CVP)."""
    t = _check_time(spec, t)
    if spec.family == "LVP":
        return spec.beta_min * t + 0.5 * (spec.beta_max - spec.beta_min) * t**2
    if spec.family == "CVP":
        # Simpson on the smooth part, exact on the capped tail past the kink
        head = np.minimum(t, _cvp_cap_time(spec))
        u = np.linspace(0.0, 1.0, _SIMPSON_INTERVALS + 1)
        nodes = head[..., None] * u
        w = np.ones_like(u)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        smooth = (_cvp_beta(spec, nodes) * w).sum(axis=-1) * head / (3.0 * _SIMPSON_INTERVALS)
        return smooth + spec.beta_max * (t - head)
    raise DomainError(f"{spec.family} has no drift rate")


def _ve_sigma_and_g2(spec: ScheduleSpec, t):
    if spec.family == "GVE":
        ratio = spec.sigma_max / spec.sigma_min
        sigma = spec.sigma_min * ratio**t
        return sigma, 2.0 * sigma**2 * math.log(ratio)
    base, slope = _wve_base(spec, t)
    if spec.family == "WVE_paper":
        var = base ** (1.0 / spec.rho)
        return np.sqrt(var), base ** (1.0 / spec.rho - 1.0) * slope / spec.rho
    # WVE_edm, oriented so that sigma grows from sigma_min to sigma_max
    sigma = base**spec.rho
    return sigma, 2.0 * spec.rho * base ** (2.0 * spec.rho - 1.0) * slope


def schedule_eval(spec: ScheduleSpec, t) -> ScheduleValues:
    """Return ``(beta_t, g_t, sigma_t)``; ``beta`` is 0 for VE families."""
    t = _check_time(spec, t)
    if spec.is_vp:
        beta = _beta(spec, t)
        k = kernel_coeffs(spec, t)
        return ScheduleValues(beta, np.sqrt(beta), k.std / k.mean_scale)
    sigma, g2 = _ve_sigma_and_g2(spec, t)
    return ScheduleValues(np.zeros_like(t), np.sqrt(g2), sigma)


def kernel_coeffs(spec: ScheduleSpec, t) -> KernelCoeffs:
    t = _check_time(spec, t)
    if spec.is_vp:
        big_b = integrated_beta(spec, t)
        return KernelCoeffs(np.exp(-0.5 * big_b), np.sqrt(-np.expm1(-big_b)))
    sigma, _ = _ve_sigma_and_g2(spec, t)
    return KernelCoeffs(np.ones_like(t), sigma)


def noise_level(spec: ScheduleSpec, t) -> np.ndarray:
    """Perturbation level sigma(t): ``s_t / m_t`` (equal to ``sigma_t`` for VE)."""
    k = kernel_coeffs(spec, t)
    with np.errstate(divide="ignore"):
        return k.std / k.mean_scale


def time_of_noise_level(spec: ScheduleSpec, sigma: float) -> float:
    """Inverse of :func:`noise_level` on ``[0, t_max]``."""
    lo, hi = float(noise_level(spec, 0.0)), float(noise_level(spec, spec.t_max))
    if not lo <= sigma <= hi:
        raise DomainError(f"sigma={sigma} outside schedule range [{lo}, {hi}]")
    fam = spec.family
    if fam == "LVP":
        big_b = math.log1p(sigma**2)
        d = spec.beta_max - spec.beta_min
        t = 2.0 * big_b / (spec.beta_min + math.sqrt(spec.beta_min**2 + 2.0 * d * big_b))
    elif fam == "GVE":
        t = math.log(sigma / spec.sigma_min) / math.log(spec.sigma_max / spec.sigma_min)
    elif fam in ("WVE_paper", "WVE_edm"):
        a = spec.sigma_min ** (1.0 / spec.rho)
        b = spec.sigma_max ** (1.0 / spec.rho)
        base = sigma ** (2.0 * spec.rho) if fam == "WVE_paper" else sigma ** (1.0 / spec.rho)
        t = (base - a) / (b - a)
    else:
        if sigma == lo:
            return 0.0
        t = brentq(lambda u: float(noise_level(spec, u)) - sigma, 0.0, spec.t_max, xtol=1e-14, rtol=1e-14)
    return float(min(max(t, 0.0), spec.t_max))


def perturb(x0, t, noise, spec: ScheduleSpec) -> np.ndarray:
    """Draw from the forward kernel: ``m_t * x0 + s_t * noise``.

    ``t`` may be a scalar or one time per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    k = kernel_coeffs(spec, t)
    m, s = k.mean_scale, k.std
    if m.ndim == 1 and x0.ndim == 2:
        m, s = m[:, None], s[:, None]
    return m * x0 + s * noise


def drift_diffusion(x, t, spec: ScheduleSpec):
    """Forward drift ``f(x, t)`` and diffusion coefficient ``g_t``."""
    vals = schedule_eval(spec, t)
    x = np.asarray(x, dtype=float)
    drift = -0.5 * vals.beta * x if spec.is_vp else np.zeros_like(x)
    return drift, vals.g


def discrete_forward_step(x, t_index: int, betas, noise, beta_scaled_noise: bool = False) -> np.ndarray:
    """One step of the discrete noising chain.

    Uses ``sqrt(1 - beta) x + sqrt(beta) noise``. ``beta_scaled_noise=True`` scales the
    noise by ``beta`` instead of ``sqrt(beta)``; that variant does not preserve
    variance and exists only for inspection.
    """
    betas = np.asarray(betas, dtype=float)
    if not 0 <= t_index < len(betas):
        raise IndexError(f"t_index {t_index} out of range for {len(betas)} betas")
    beta = float(betas[t_index])
    if not 0.0 <= beta < 1.0:
        raise DomainError(f"beta must lie in [0, 1), got {beta}")
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x.shape != noise.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs noise {noise.shape}")
    scale = beta if beta_scaled_noise else math.sqrt(beta)
    return math.sqrt(1.0 - beta) * x + scale * noise


def discretize_betas(spec: ScheduleSpec, n_steps: int) -> np.ndarray:
    """Midpoint discretization ``beta_i = beta(t_mid) * dt`` of a VP schedule."""
    if not spec.is_vp:
        raise DomainError("discrete betas are defined for VP schedules only")
    dt = spec.t_max / n_steps
    mids = (np.arange(n_steps) + 0.5) * dt
    betas = _beta(spec, mids) * dt
    if np.any(betas >= 1.0):
        raise DomainError(f"{n_steps} steps too coarse: discrete beta reaches {betas.max():.3f}")
    return betas

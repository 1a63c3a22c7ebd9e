import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discguide import analytic_oracle as ao
from discguide import samplers as sm
from discguide import tiny_nets as tn
from discguide.diffusion_sde import DomainError, ScheduleSpec, kernel_coeffs, noise_level, schedule_eval

LVP = ScheduleSpec("LVP")
GVE = ScheduleSpec("GVE")
WVE = ScheduleSpec("WVE_edm")
GMM = ao.bimodal_1d()


def linear_score(c=0.0):
    return lambda x, t: -x + c


def zero_disc(dim=1):
    return tn.init_params(dim, "disc", np.random.default_rng(0), hidden=(16, 16), emb_dim=4)


# -- config and grids ---------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(solver="rk4"), dict(guidance="cfg"), dict(nfe=0), dict(churn=-1.0),
                                dict(s_noise=0.0), dict(grid="log")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        sm.SamplerConfig(**kw)


def test_heun_step_count():
    assert sm.SamplerConfig(solver="pf_ode_heun", nfe=35).n_steps == 18
    assert sm.SamplerConfig(solver="pf_ode_heun", nfe=36).n_steps == 18
    assert sm.SamplerConfig(solver="churn_alg1", nfe=35).n_steps == 35


@pytest.mark.parametrize("spec", [LVP, ScheduleSpec("CVP"), GVE, WVE])
@pytest.mark.parametrize("kind", ["rho", "uniform"])
def test_grid_decreasing_and_anchored(spec, kind):
    g = sm.make_time_grid(spec, 35, 1e-3, kind)
    assert g[0] == spec.t_max and g[-1] == 1e-3 and len(g) == 36
    assert np.all(np.diff(g) < 0)


def test_rho_grid_matches_warped_levels():
    g = sm.make_time_grid(GVE, 10, 1e-3, "rho", 7.0)
    sig = noise_level(GVE, g)
    lo, hi = sig[-1], sig[0]
    u = np.linspace(0, 1, 11)
    np.testing.assert_allclose(sig, (hi ** (1 / 7) + u * (lo ** (1 / 7) - hi ** (1 / 7))) ** 7, rtol=1e-9)


def test_refine_grid():
    g = np.array([1.0, 0.5, 0.1])
    np.testing.assert_allclose(sm.refine_grid(g, 2), [1.0, 0.75, 0.5, 0.3, 0.1])


def test_prior_std():
    assert sm.prior_std(LVP) == 1.0
    assert sm.prior_std(GVE) == pytest.approx(50.0, rel=1e-12)


# -- drifts ------------------------------------------------------------------------------

def test_generative_drift_examples():
    x = np.array([[1.0], [-2.0]])
    s = lambda y, t: 0.3 * y + 1.0  # noqa: E731
    g2 = float(schedule_eval(GVE, 0.4).g) ** 2
    np.testing.assert_allclose(sm.generative_drift(x, 0.4, s, GVE), -g2 * s(x, 0.4), rtol=1e-15)
    beta = float(schedule_eval(LVP, 0.4).beta)
    np.testing.assert_allclose(sm.generative_drift(x, 0.4, lambda y, t: np.zeros_like(y), LVP), -0.5 * beta * x)


def test_guided_drift_reduces_to_generative():
    x = np.random.default_rng(0).standard_normal((7, 1))
    s = linear_score(0.2)
    base = sm.generative_drift(x, 0.3, s, LVP)
    np.testing.assert_array_equal(sm.guided_drift(x, 0.3, s, lambda y, t: np.zeros_like(y), 1.0, LVP), base)
    np.testing.assert_array_equal(sm.guided_drift(x, 0.3, s, sm.discriminator_guidance(zero_disc()), 1.0, LVP), base)
    np.testing.assert_array_equal(sm.guided_drift(x, 0.3, s, None, 1.0, LVP), base)


def test_ratio_correction_restores_reverse_drift():
    # model score is the exact score of its own marginal; ratio to the data marginal fixes it
    c = 0.7
    rng = np.random.default_rng(1)
    data = ao.GaussianMixture(np.ones(1), [[0.0]], [[1.0]])
    for _ in range(100):
        t = float(rng.uniform(1e-3, 1.0))
        x = rng.normal(0, 2, (1, 1))
        q_t = ao.gaussian_from_moments(ao.linear_sde_marginal(LVP, t, c, 0.0, 1.0))
        p_t = ao.perturbed_mixture(data, LVP, t)
        s_model = lambda y, tt: ao.score(q_t, y)  # noqa: E731
        guide = lambda y, tt: ao.grad_log_ratio(p_t, q_t, y)  # noqa: E731
        guided = sm.guided_drift(x, t, s_model, guide, 1.0, LVP)
        exact = sm.reverse_drift(x, t, lambda y, tt: ao.score(p_t, y), LVP)
        np.testing.assert_allclose(guided, exact, rtol=0, atol=1e-10)


def test_guidance_from_discriminator_fd():
    rng = np.random.default_rng(3)
    p = tn.init_params(1, "disc", rng, hidden=(8, 8), emb_dim=4)
    for a in p.tensors():
        a += 0.5 * rng.standard_normal(a.shape)
    x = rng.standard_normal((9, 1))
    g = sm.guidance_from_discriminator(p, x, 0.5)
    h = 1e-6
    fd = (tn.log_odds(p, x + h, 0.5) - tn.log_odds(p, x - h, 0.5)) / (2 * h)
    np.testing.assert_allclose(g[:, 0], fd, rtol=1e-4, atol=1e-8)
    np.testing.assert_array_equal(sm.guidance_from_discriminator(zero_disc(), x, 0.5), 0.0)


def test_biased_oracle_restores_data_score():
    c = 0.4
    orc = sm.biased_model_oracle(GMM, LVP, c)
    s_biased = sm.oracle_score(GMM, LVP, c)
    x = np.linspace(-4, 4, 21)[:, None]
    for t in (0.01, 0.3, 0.8):
        fixed = s_biased(x, t) + orc.guidance()(x, t)
        np.testing.assert_allclose(fixed, ao.score(ao.perturbed_mixture(GMM, LVP, t), x), atol=1e-9)


# -- single steps -------------------------------------------------------------------------

def test_em_step_examples():
    x = np.array([[0.3], [-1.2]])
    zero = lambda y, t: np.zeros_like(y)  # noqa: E731
    np.testing.assert_array_equal(sm.em_step(x, 0.5, 0.4, zero, LVP, np.zeros_like(x)), x)
    with pytest.raises(sm.SamplerUsageError):
        sm.em_step(x, 0.4, 0.4, zero, LVP, np.zeros_like(x))
    # drift -x integrated backwards over h: exact factor e^h, Euler gives 1 + h
    lin = lambda y, t: -y  # noqa: E731
    for h in (0.1, 0.01, 0.001):
        out = sm.em_step(x, 0.5, 0.5 - h, lin, LVP, np.zeros_like(x))
        np.testing.assert_allclose(out, (1 + h) * x, rtol=1e-14)
        assert np.max(np.abs(out - math.exp(h) * x)) <= 0.6 * h**2 * np.max(np.abs(x)) * math.exp(h)


def test_em_step_noise_scale():
    g = float(schedule_eval(LVP, 0.5).g)
    zero = lambda y, t: np.zeros_like(y)  # noqa: E731
    out = sm.em_step(np.zeros((1, 1)), 0.5, 0.3, zero, LVP, np.ones((1, 1)))
    assert float(out[0, 0]) == pytest.approx(g * math.sqrt(0.2), rel=1e-14)


def test_churn_step_without_churn_is_deterministic_update():
    grid = sm.make_time_grid(LVP, 10)
    x = np.array([[0.5], [-1.0]])
    eps = np.array([[3.0], [-2.0]])
    s = linear_score(0.3)
    a = sm.churn_step(x, 2, grid, s, None, LVP, eps, gamma=0.0)
    b = sm.churn_step(x, 2, grid, s, None, LVP, np.zeros_like(eps), gamma=0.0)
    np.testing.assert_array_equal(a, b)
    t_i, t_n = grid[2], grid[3]
    beta = float(schedule_eval(LVP, t_i).beta)
    expect = x + (t_n - t_i) * (-0.5 * beta * x - 0.5 * beta * s(x, t_i))
    np.testing.assert_allclose(a, expect, rtol=0, atol=1e-12)


def test_churn_step_hand_computed_with_churn():
    grid = sm.make_time_grid(LVP, 10)
    i, gamma, s_noise, c = 4, 0.2, 1.007, -0.4
    x = np.array([[0.8], [-0.1]])
    eps = np.array([[0.3], [1.1]])
    out = sm.churn_step(x, i, grid, linear_score(c), None, LVP, eps, gamma=gamma, s_noise=s_noise)
    # independent evaluation with the closed-form LVP kernel
    t_i, t_n = float(grid[i]), float(grid[i + 1])
    t_hat = t_i + gamma * t_i
    B = lambda t: 0.1 * t + 0.5 * 19.9 * t * t  # noqa: E731
    m = lambda t: math.exp(-0.5 * B(t))  # noqa: E731
    r = m(t_hat) / m(t_i)
    var = (1 - m(t_hat) ** 2) - r**2 * (1 - m(t_i) ** 2)
    x_hat = r * x + math.sqrt(var) * s_noise * eps
    beta = 0.1 + 19.9 * t_hat
    d = -0.5 * beta * x_hat - 0.5 * beta * (-x_hat + c)
    np.testing.assert_allclose(out, x_hat + (t_n - t_hat) * d, rtol=0, atol=1e-12)


def test_churn_noise_matches_sigma_increment_for_ve():
    grid = sm.make_time_grid(GVE, 10)
    t_i = float(grid[3])
    x_hat, t_hat = sm._churn(np.zeros((1, 1)), t_i, 0.1, GVE, np.ones((1, 1)), 1.0)
    s_hat, s_i = float(kernel_coeffs(GVE, t_hat).std), float(kernel_coeffs(GVE, t_i).std)
    assert float(x_hat[0, 0]) == pytest.approx(math.sqrt(s_hat**2 - s_i**2), rel=1e-12)


def test_negative_churn_rejected():
    grid = sm.make_time_grid(LVP, 10)
    with pytest.raises(DomainError):
        sm.churn_step(np.zeros((1, 1)), 1, grid, linear_score(), None, LVP, np.zeros((1, 1)), gamma=-0.1)


def test_churn_gamma_rule():
    cfg = sm.SamplerConfig(churn=10.0, nfe=20)
    grid = sm.make_time_grid(LVP, 20)
    gammas = [sm.churn_gamma(cfg, LVP, float(t), 20) for t in grid[:-1]]
    sig = noise_level(LVP, grid[:-1])
    inside = (sig >= cfg.s_tmin) & (sig <= cfg.s_tmax)
    for g, t, ok in zip(gammas, grid[:-1], inside):
        if ok:
            assert g == pytest.approx(min(0.5, math.sqrt(2) - 1, LVP.t_max / t - 1))
        else:
            assert g == 0.0
    assert sm.churn_gamma(sm.SamplerConfig(), LVP, 0.5, 20) == 0.0


# -- full sampler ---------------------------------------------------------------------------

@pytest.mark.parametrize("solver,nfe", [("churn_alg1", 35), ("churn_alg1", 71), ("euler_maruyama", 35),
                                        ("pf_ode_heun", 35), ("pf_ode_heun", 71), ("pf_ode_heun", 36)])
def test_nfe_accounting(solver, nfe):
    b = sm.sample(sm.SamplerConfig(solver=solver, nfe=nfe), linear_score(), None, 4, LVP)
    assert b.nfe_used == nfe


@pytest.mark.parametrize("solver", sm.SOLVERS)
def test_sample_deterministic_and_order_independent(solver):
    cfg = sm.SamplerConfig(solver=solver, nfe=12, churn=5.0)
    s = sm.oracle_score(GMM, LVP)
    a = sm.sample(cfg, s, None, 10, LVP)
    b = sm.sample(cfg, s, None, 10, LVP)
    np.testing.assert_array_equal(a.points, b.points)
    # chain k depends only on (seed, k), not on the batch it runs in
    tail = sm.sample(cfg, s, None, 4, LVP, chain_offset=6)
    np.testing.assert_array_equal(tail.points, a.points[6:])


def test_trajectories_recorded():
    b = sm.sample(sm.SamplerConfig(nfe=8), linear_score(), None, 3, LVP, record=True)
    assert b.traj_x.shape == (9, 3, 1) and b.traj_t[-1] == 1e-3
    assert np.all(np.diff(b.traj_t) < 0)
    np.testing.assert_array_equal(b.traj_x[-1], b.points)
    tr = b.trajectories()
    assert len(tr) == 3 and tr[1].chain_id == 1


def test_guidance_requires_function():
    with pytest.raises(sm.SamplerUsageError):
        sm.sample(sm.SamplerConfig(guidance="discriminator"), linear_score(), None, 2, LVP)
    with pytest.raises(sm.SamplerUsageError):
        sm.sample(sm.SamplerConfig(), linear_score(), None, 0, LVP)


@pytest.mark.parametrize("solver", sm.SOLVERS)
def test_guidance_off_equivalence(solver):
    cfg = sm.SamplerConfig(solver=solver, nfe=20, churn=3.0)
    s = sm.oracle_score(GMM, LVP, 0.3)
    base = sm.sample(cfg, s, None, 100, LVP)
    guided = sm.sample(sm.with_guidance(cfg, "discriminator"), s, sm.discriminator_guidance(zero_disc()), 100, LVP)
    np.testing.assert_array_equal(base.points, guided.points)


def test_long_em_run_reproduces_data_moments():
    cfg = sm.SamplerConfig(solver="euler_maruyama", nfe=1000, grid="uniform", t_eps=1e-4, seed=5)
    b = sm.sample(cfg, sm.oracle_score(GMM, LVP), None, 20000, LVP)
    x = b.points[:, 0]
    n = len(x)
    var = float(GMM.covariance_diag()[0])
    assert abs(x.mean() - 0.0) < 3 * math.sqrt(var / n)
    # kurtosis of the bimodal mixture is below 3, so this SE is conservative
    assert abs(x.var() - var) < 3 * var * math.sqrt(2.0 / n) + 0.02


def test_ve_prior_scale():
    b = sm.sample(sm.SamplerConfig(nfe=2), lambda x, t: np.zeros_like(x), None, 4000, GVE, record=True)
    assert b.traj_x[0].std() == pytest.approx(50.0, rel=0.05)


# -- rejection -----------------------------------------------------------------------------

def test_rejection_all_accepted_at_max():
    cfg = sm.SamplerConfig(nfe=5)
    res = sm.rejection_sample(cfg, linear_score(), None, lambda x, t: np.full(len(x), 1 - 1e-5), 50, LVP)
    assert res.alpha == 1.0 and res.accepted == res.attempted


def test_rejection_boundary_is_accepted():
    cfg = sm.SamplerConfig(nfe=5)
    res = sm.rejection_sample(cfg, linear_score(), None, zero_disc(), 30, LVP)
    assert res.alpha == 1.0
    assert len(res.batch.accepted_points()) == res.accepted


def test_rejection_starvation():
    cfg = sm.SamplerConfig(nfe=2)
    with pytest.raises(sm.RejectionStarvation):
        sm.rejection_sample(cfg, linear_score(), None, lambda x, t: np.full(len(x), 1e-5), 10, LVP,
                            batch_size=2500)


def test_rejection_argument_checks():
    cfg = sm.SamplerConfig(nfe=2)
    with pytest.raises(sm.SamplerUsageError):
        sm.rejection_sample(cfg, linear_score(), None, zero_disc(), 10, LVP, threshold=1.0)
    with pytest.raises(sm.SamplerUsageError):
        sm.rejection_sample(cfg, linear_score(), None, zero_disc(), 0, LVP)


def test_rejection_rate_matches_ratio_mass():
    # exact score of a diffused model mixture q0; d* accepts where data density >= model density
    q0 = ao.tilted_mixture(GMM, 0.3)
    cfg = sm.SamplerConfig(solver="pf_ode_heun", nfe=71, seed=2)
    orc = sm.diffused_model_oracle(GMM, q0, LVP)
    res = sm.rejection_sample(cfg, sm.oracle_score(q0, LVP), None, orc.discriminator(), 2000, LVP,
                              batch_size=4000)
    p, q = orc.p_at(cfg.t_eps), orc.q_at(cfg.t_eps)
    xs = np.linspace(-8, 8, 160_001)[:, None]
    mass = np.exp(ao.log_density(q, xs)) * (ao.log_ratio(p, q, xs) >= 0)
    expect = float(np.trapezoid(mass, xs[:, 0]))
    se = math.sqrt(expect * (1 - expect) / res.attempted)
    assert abs(res.alpha - expect) < 3 * se + 0.01


# -- export -------------------------------------------------------------------------------

def test_trajectory_csv(tmp_path):
    b = sm.sample(sm.SamplerConfig(nfe=3), linear_score(), None, 2, LVP, record=True)
    sm.write_trajectories_csv(tmp_path / "t.csv", b, LVP, log_ratio=np.zeros((4, 2)))
    rows = list(csv.reader((tmp_path / "t.csv").open()))
    assert rows[0] == ["chain_id", "step", "t", "sigma", "x_0", "log_ratio"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[1][2]) == 1.0 and rows[4][1] == "3"
    no_traj = sm.sample(sm.SamplerConfig(nfe=3), linear_score(), None, 2, LVP)
    with pytest.raises(sm.SamplerUsageError):
        sm.write_trajectories_csv(tmp_path / "u.csv", no_traj, LVP)


@settings(max_examples=20, deadline=None)
@given(factor=st.integers(2, 5), n=st.integers(2, 8), seed=st.integers(0, 1000))
def test_brownian_coarsen_shares_path(factor, n, seed):
    coarse = sm.make_time_grid(LVP, n, kind="uniform")
    fine = sm.refine_grid(coarse, factor)
    z = np.random.default_rng(seed).standard_normal((len(fine), 3, 1))
    cz = sm.brownian_coarsen(z, fine, factor)
    assert cz.shape == (n + 1, 3, 1)
    np.testing.assert_array_equal(cz[0], z[0])
    inc_fine = (z[1:] * np.sqrt(-np.diff(fine))[:, None, None]).reshape(n, factor, 3, 1).sum(1)
    np.testing.assert_allclose(cz[1:] * np.sqrt(-np.diff(coarse))[:, None, None], inc_fine, rtol=1e-12, atol=1e-14)


def test_brownian_coarsen_unit_variance():
    coarse = sm.make_time_grid(LVP, 5)
    fine = sm.refine_grid(coarse, 4)
    z = np.random.default_rng(0).standard_normal((len(fine), 20000, 1))
    cz = sm.brownian_coarsen(z, fine, 4)
    assert np.all(np.abs(cz.var(axis=1) - 1) < 0.05)

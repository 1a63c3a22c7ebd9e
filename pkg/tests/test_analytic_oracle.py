import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from discguide import analytic_oracle as ao
from discguide.diffusion_sde import ScheduleSpec, kernel_coeffs, perturb, schedule_eval, time_of_noise_level

LVP = ScheduleSpec("LVP")
STD = ao.GaussianMixture(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)))
PM1 = ao.GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.ones((2, 1)))


def gauss(mu, var=1.0):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    return ao.GaussianMixture(np.ones(1), mu[None], np.full((1, mu.size), var))


@st.composite
def mixtures(draw, dim=None):
    d = draw(st.integers(1, 3)) if dim is None else dim
    k = draw(st.integers(1, 4))
    raw = draw(st.lists(st.floats(0.1, 1.0), min_size=k, max_size=k))
    w = np.array(raw) / sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    mu = np.array(draw(st.lists(st.floats(-3, 3), min_size=k * d, max_size=k * d))).reshape(k, d)
    var = np.array(draw(st.lists(st.floats(0.2, 3.0), min_size=k * d, max_size=k * d))).reshape(k, d)
    return ao.GaussianMixture(w, mu, var)


def points(gmm, n, seed):
    return np.random.default_rng(seed).uniform(-3, 3, size=(n, gmm.dim))


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for j in range(x.shape[-1]):
        e = np.zeros_like(x)
        e[..., j] = h
        g[..., j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# -- construction -----------------------------------------------------------------

def test_invalid_mixtures():
    with pytest.raises(ValueError):
        ao.GaussianMixture(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        ao.GaussianMixture(np.ones(1), np.zeros((1, 1)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        ao.GaussianMixture(np.array([0.5, 0.5]), np.zeros((3, 1)), np.ones((3, 1)))


def test_mixture_is_immutable():
    with pytest.raises(ValueError):
        STD.means[0, 0] = 1.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ao.log_density(STD, np.zeros((4, 2)))


# -- log_density / score ------------------------------------------------------------

def test_log_density_examples():
    assert ao.log_density(STD, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert ao.log_density(PM1, np.zeros(1)) == pytest.approx(math.log(math.exp(-0.5) / math.sqrt(2 * math.pi)), abs=1e-14)


def test_log_density_ring_direct_sum():
    ring = ao.ring_8()
    x = points(ring, 50, 1) * 1.5
    dens = np.zeros(len(x))
    for w, mu, var in zip(ring.weights, ring.means, ring.variances):
        dens += w * np.prod(np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var), axis=1)
    np.testing.assert_allclose(ao.log_density(ring, x), np.log(dens), rtol=0, atol=1e-12)


def test_score_examples():
    np.testing.assert_allclose(ao.score(STD, np.array([2.0])), [-2.0], rtol=1e-15)
    np.testing.assert_allclose(ao.score(PM1, np.array([0.0])), [0.0], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(gmm=mixtures(), seed=st.integers(0, 2**31))
def test_score_matches_finite_difference(gmm, seed):
    x = points(gmm, 1, seed)
    fd = fd_grad(lambda y: ao.log_density(gmm, y), x)
    np.testing.assert_allclose(ao.score(gmm, x), fd, rtol=1e-5, atol=1e-7)


def test_far_tail_is_finite():
    x = np.array([[1e4]])
    assert np.isfinite(ao.log_density(PM1, x)).all()
    assert np.isfinite(ao.score(PM1, x)).all()
    assert ao.optimal_discriminator(gauss(0.0), gauss(1.0), x)[0] in (0.0, pytest.approx(0.0))


# -- perturbed_mixture ----------------------------------------------------------------

def test_perturbed_at_zero_is_identity():
    g = ao.bimodal_1d()
    assert ao.perturbed_mixture(g, LVP, 0.0).allclose(g, atol=0)


def test_perturbed_point_mass_limit_ve():
    gve = ScheduleSpec("GVE")
    t = time_of_noise_level(gve, 2.0)
    out = ao.perturbed_mixture(gauss(0.0, 1e-300), gve, t)
    np.testing.assert_allclose(out.variances, [[4.0]], rtol=1e-12)
    np.testing.assert_allclose(out.means, [[0.0]])


@pytest.mark.parametrize("t", [0.05, 0.3, 0.9])
def test_perturbed_moments_monte_carlo(t):
    g = ao.ring_8()
    rng = np.random.default_rng(7)
    x0 = g.sample(100_000, rng)
    xt = perturb(x0, t, rng.standard_normal(x0.shape), LVP)
    pm = ao.perturbed_mixture(g, LVP, t)
    n = len(xt)
    var = pm.covariance_diag()
    assert np.all(np.abs(xt.mean(0) - pm.mean()) < 3 * np.sqrt(var / n))
    # sample variance has standard error ~ var * sqrt(2 / n) for near-Gaussian tails; the ring is lighter
    assert np.all(np.abs(xt.var(0) - var) < 3 * var * np.sqrt(2.0 / n))


@settings(max_examples=50, deadline=None)
@given(gmm=mixtures(), t1=st.floats(0.01, 0.99), frac=st.floats(0.0, 1.0))
def test_vp_semigroup(gmm, t1, frac):
    t2 = t1 + frac * (1.0 - t1)
    direct = ao.perturbed_mixture(gmm, LVP, t2)
    # conditional step from t1 to t2: scale m2/m1, added variance s2^2 - (m2/m1)^2 s1^2
    k1, k2 = kernel_coeffs(LVP, t1), kernel_coeffs(LVP, t2)
    r = float(k2.mean_scale / k1.mean_scale)
    mid = ao.perturbed_mixture(gmm, LVP, t1)
    two = ao.GaussianMixture(mid.weights, r * mid.means, r**2 * mid.variances + float(k2.std) ** 2 - r**2 * float(k1.std) ** 2)
    assert two.allclose(direct, atol=1e-10)


# -- tilt -----------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(gmm=mixtures(dim=1), c=st.floats(-1.5, 1.5), seed=st.integers(0, 2**31))
def test_tilt_shifts_score(gmm, c, seed):
    x = points(gmm, 5, seed)
    np.testing.assert_allclose(ao.score(ao.tilted_mixture(gmm, c), x), ao.score(gmm, x) + c, rtol=1e-9, atol=1e-9)


def test_tilt_normalised():
    g = ao.tilted_mixture(ao.bimodal_1d(), 0.7)
    xs = np.linspace(-12, 12, 200_001)[:, None]
    assert np.trapezoid(np.exp(ao.log_density(g, xs)), xs[:, 0]) == pytest.approx(1.0, abs=1e-10)


# -- discriminator / ratio ------------------------------------------------------------

def test_optimal_discriminator_examples():
    p, q = gauss(0.0), gauss(1.0)
    assert ao.optimal_discriminator(p, p, np.array([0.37])) == 0.5
    assert ao.optimal_discriminator(p, q, np.array([0.5])) == pytest.approx(0.5, abs=1e-15)
    assert ao.optimal_discriminator(p, q, np.array([0.0])) == pytest.approx(1 / (1 + math.exp(-0.5)), rel=1e-14)


def test_grad_log_ratio_examples():
    p = ao.ring_8()
    np.testing.assert_array_equal(ao.grad_log_ratio(p, p, points(p, 10, 0)), 0.0)
    a, b = gauss([1.0, -1.0], 2.0), gauss([0.5, 0.5], 2.0)
    g = ao.grad_log_ratio(a, b, points(a, 20, 3))
    np.testing.assert_allclose(g, np.broadcast_to([0.25, -0.75], g.shape), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(p=mixtures(dim=2), q=mixtures(dim=2), seed=st.integers(0, 2**31))
def test_ratio_properties(p, q, seed):
    x = points(p, 20, seed)
    d_pq, d_qp = ao.optimal_discriminator(p, q, x), ao.optimal_discriminator(q, p, x)
    assert np.all(d_pq + d_qp == 1.0)
    np.testing.assert_array_equal(ao.grad_log_ratio(p, q, x), -ao.grad_log_ratio(q, p, x))
    # recovering the logit from d loses ~eps * e^|L|, so compare where d is well inside (0, 1)
    lr = ao.log_ratio(p, q, x)
    ok = np.abs(lr) < 10
    np.testing.assert_allclose(logit(d_pq[ok]), lr[ok], rtol=0, atol=1e-10)
    fd = fd_grad(lambda y: ao.log_ratio(p, q, y), x)
    np.testing.assert_allclose(ao.grad_log_ratio(p, q, x), fd, rtol=1e-6, atol=1e-6)


# -- linear SDE marginal --------------------------------------------------------------

def test_linear_marginal_stationary():
    for t in (0.0, 0.2, 0.7, 1.0):
        m = ao.linear_sde_marginal(LVP, t, 0.0, 0.0, 1.0)
        assert float(m.mean) == 0.0 and float(m.covariance) == pytest.approx(1.0, abs=1e-15)


def test_linear_marginal_requires_vp():
    with pytest.raises(ao.UnsupportedError):
        ao.linear_sde_marginal(ScheduleSpec("GVE"), 0.5, 0.0, 0.0, 1.0)


@pytest.mark.parametrize("c", [0.3, -1.0])
def test_linear_marginal_mean_ode(c):
    # dm/dtau = beta (c - m / 2) in reverse time tau; integrate with RK4 from T down to 0
    n = 20_000
    ts = np.linspace(1.0, 0.0, n + 1)
    m = 0.0
    f = lambda t, m: -(float(schedule_eval(LVP, t).beta) * (c - 0.5 * m))  # noqa: E731  (dm/dt, t decreasing)
    for i in range(n):
        t, h = ts[i], ts[i + 1] - ts[i]
        k1 = f(t, m)
        k2 = f(t + h / 2, m + h / 2 * k1)
        k3 = f(t + h / 2, m + h / 2 * k2)
        k4 = f(t + h, m + h * k3)
        m += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert float(ao.linear_sde_marginal(LVP, 0.0, c, 0.0, 1.0).mean) == pytest.approx(m, rel=1e-9)
    # offset is proportional to c
    assert float(ao.linear_sde_marginal(LVP, 0.0, 2 * c, 0.0, 1.0).mean) == pytest.approx(2 * m, rel=1e-12)


def test_linear_marginal_monte_carlo():
    c, mu_T, var_T, t_end = 0.4, 0.5, 2.0, 0.1
    n, steps = 100_000, 4096
    rng = np.random.default_rng(11)
    x = mu_T + math.sqrt(var_T) * rng.standard_normal(n)
    ts = np.linspace(1.0, t_end, steps + 1)
    for i in range(steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        beta = float(schedule_eval(LVP, t).beta)
        # reverse SDE with score -x + c
        x = x + dt * (0.5 * beta * x + beta * (-x + c)) + math.sqrt(beta * dt) * rng.standard_normal(n)
    mom = ao.linear_sde_marginal(LVP, t_end, c, mu_T, var_T)
    se_mean = math.sqrt(float(mom.covariance) / n)
    se_var = float(mom.covariance) * math.sqrt(2.0 / n)
    assert abs(x.mean() - float(mom.mean)) < 3 * se_mean + 2e-3
    assert abs(x.var() - float(mom.covariance)) < 3 * se_var + 2e-3


# -- datasets and point clouds ----------------------------------------------------------

def test_named_datasets():
    b = ao.get_dataset("bimodal-1d")
    np.testing.assert_array_equal(b.means[:, 0], [-2.0, 2.0])
    np.testing.assert_array_equal(b.variances[:, 0], [0.25, 0.25])
    r = ao.get_dataset("ring-8")
    np.testing.assert_allclose(np.linalg.norm(r.means, axis=1), 4.0, rtol=1e-14)
    with pytest.raises(KeyError):
        ao.get_dataset("swiss-roll")


def test_point_cloud_roundtrip(tmp_path):
    pts = np.random.default_rng(0).standard_normal((17, 3))
    ao.save_point_cloud(tmp_path / "p.csv", pts)
    np.testing.assert_array_equal(ao.load_point_cloud(tmp_path / "p.csv"), pts)
    (tmp_path / "raw.csv").write_text("1,2\n3,4\n")
    np.testing.assert_array_equal(ao.load_point_cloud(tmp_path / "raw.csv"), [[1, 2], [3, 4]])

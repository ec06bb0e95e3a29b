import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepsmp.constraints import FloorBox
from deepsmp.market import (
    Coefficients,
    DeterministicMarkovian,
    HestonAugmented,
    PathDependentMomentum,
    VasicekAugmented,
    invert,
    make_market,
    sample_noise,
    step_adjoint,
    step_dual,
    step_dual_adjoint,
    step_wealth,
)

MODELS = [
    DeterministicMarkovian(),
    DeterministicMarkovian(m=5, sigma_kind="inverse_one_plus", sigma_off=0.05),
    PathDependentMomentum(),
    HestonAugmented(),
    VasicekAugmented(),
]


def const_coeffs(r, mu, sigma):
    sigma = np.atleast_2d(sigma).astype(float)
    mu = np.atleast_1d(mu).astype(float)
    theta = np.linalg.solve(sigma, mu - r)
    return Coefficients(r=np.array([[r]]), mu=mu[None], theta=theta[None], sigma=sigma)


def test_noise_moments_and_determinism():
    dt = 0.05
    z = sample_noise(7, 100_000, 1, 1, dt).ravel()
    se = np.sqrt(dt / z.size)
    assert abs(z.mean()) < 4 * se
    # var of the sample variance is 2 dt^2 / n for Gaussians
    assert abs(z.var() - dt) < 4 * dt * np.sqrt(2 / z.size)
    np.testing.assert_array_equal(sample_noise(3, 4, 2, 5, dt), sample_noise(3, 4, 2, 5, dt))
    with pytest.raises(ValueError):
        sample_noise(0, 1, 1, 1, 0.0)


@pytest.mark.parametrize("model", MODELS, ids=lambda m: type(m).__name__)
def test_theta_and_inverse_consistency(model):
    noise = sample_noise(1, 16, model.m_total, 8, 0.5 / 8)
    for i, c in enumerate(model.path(noise, 0.5).coeffs):
        for row in (0, 7):
            sig = c.sigma_matrix(row)
            r = c.r[min(row, c.r.shape[0] - 1), 0]
            mu = c.mu[min(row, c.mu.shape[0] - 1)]
            theta = c.theta[min(row, c.theta.shape[0] - 1)]
            np.testing.assert_allclose(sig @ theta, mu - r, atol=1e-12)
            if c.sigma_inv is not None:
                np.testing.assert_allclose(sig @ c.sigma_inv, np.eye(sig.shape[0]), atol=1e-10)


def test_identity_sigma_theta():
    c = const_coeffs(0.03, [0.05, 0.1], np.eye(2))
    np.testing.assert_allclose(c.theta, [[0.02, 0.07]])


def test_example_4_1_coefficients_at_zero():
    c = DeterministicMarkovian().coefficients({}, 0.0)
    assert c.r[0, 0] == pytest.approx(0.06)
    assert np.allclose(np.diag(c.sigma), 0.3)
    assert c.sigma[0, 1] == pytest.approx(0.1)
    i = np.arange(1, 31)
    np.testing.assert_allclose(c.mu[0], 0.07 + 0.02 * np.sin(np.pi * i / 15))
    later = DeterministicMarkovian().coefficients({}, 0.25)
    assert later.r[0, 0] == pytest.approx(0.06 * np.exp(0.125))
    assert later.sigma[0, 0] == pytest.approx(0.3 * 1.5)


def test_singular_sigma_rejected():
    with pytest.raises(np.linalg.LinAlgError):
        invert(np.ones((3, 3)))


def test_momentum_initial_drift_and_measurability():
    model = PathDependentMomentum()
    noise = sample_noise(0, 50, 5, 10, 0.1)
    path = model.path(noise, 1.0)
    np.testing.assert_array_equal(path.coeffs[0].mu, 0.12)
    # changing noise after step k leaves mu at steps <= k untouched
    bumped = noise.copy()
    bumped[:, :, 4:] += 1.0
    other = model.path(bumped, 1.0)
    for k in range(5):
        np.testing.assert_array_equal(path.coeffs[k].mu, other.coeffs[k].mu)
    assert set(np.unique(path.coeffs[6].mu)) <= {0.08, 0.12}


def test_momentum_trapezoid_flag():
    left, trap = PathDependentMomentum(), PathDependentMomentum(quadrature="trapezoid")
    noise = sample_noise(1, 20, 5, 6, 0.1)
    assert left.path(noise, 0.6).aux["integral"].sum() != trap.path(noise, 0.6).aux["integral"].sum()
    with pytest.raises(ValueError):
        PathDependentMomentum(quadrature="simpson")


def test_wealth_step_examples():
    c = const_coeffs(0.1, [0.2], [[0.3]])
    X = np.ones((1, 1))
    assert step_wealth(X, np.zeros((1, 1)), c, np.array([[0.7]]), 0.05)[0, 0] == pytest.approx(1.005)
    # zero noise: Euler of the drift ODE
    pi = np.array([[0.5]])
    out = step_wealth(X, pi, c, np.zeros((1, 1)), 0.05)
    assert out[0, 0] == pytest.approx(1 + (0.1 + 0.5 * 0.3 * c.theta[0, 0]) * 0.05)


def test_adjoint_step_examples():
    c = const_coeffs(0.1, [0.2, 0.15], [[0.3, 0.1], [0.1, 0.3]])
    p = np.full((1, 1), -2.0)
    zero = np.zeros((1, 2))
    assert step_adjoint(p, zero, zero, c, zero, 0.05)[0, 0] == pytest.approx(-2.0 * (1 - 0.1 * 0.05))
    pi = np.array([[0.4, -0.2]])
    q = np.array([[1.0, 0.0]])
    dB = np.array([[0.3, -0.1]])
    ps = pi @ c.sigma
    out = step_adjoint(np.zeros((1, 1)), pi, q, c, dB, 0.05)
    assert out[0, 0] == pytest.approx(-ps[0, 0] * 0.05 + 0.3)


def test_adjoint_martingale_product():
    r, dt, N, n = 0.1, 0.05, 10, 100_000
    c = const_coeffs(r, [0.2], [[0.3]])
    rng = np.random.default_rng(5)
    X = np.ones((n, 1))
    p = -np.ones((n, 1))
    pi = np.zeros((n, 1))
    q = np.full((n, 1), 0.4)
    for _ in range(N):
        dB = rng.standard_normal((n, 1)) * np.sqrt(dt)
        X, p = step_wealth(X, pi, c, dB, dt), step_adjoint(p, pi, q, c, dB, dt)
    ratio = (p * X / -1.0).ravel()
    expected = ((1 - r * dt) * (1 + r * dt)) ** N
    assert abs(ratio.mean() - expected) < 3 * ratio.std(ddof=1) / np.sqrt(n)


def test_dual_step_examples():
    c = const_coeffs(0.1, [0.1, 0.1], np.eye(2))
    Y = np.ones((1, 1))
    zero = np.zeros((1, 2))
    assert step_dual(Y, zero, 0.0, c, zero, 0.05)[0, 0] == pytest.approx(1 - 0.1 * 0.05)
    K = FloorBox(0.1, 2)
    v = np.ones((1, 2))
    delta = K.support_delta(v[0])
    assert delta == pytest.approx(0.1 * 2)
    assert step_dual(Y, v, delta, c, zero, 0.05)[0, 0] == pytest.approx(1 - (0.1 + 0.2) * 0.05)
    p2 = np.full((1, 1), 2.0)
    sv = c.sigma_inv_rows(v)
    out = step_dual_adjoint(p2, zero, delta, c, zero, 0.05, sv)
    assert out[0, 0] == pytest.approx(2.0 * (1 + 0.3 * 0.05))


def test_dual_supermartingale_product():
    model = DeterministicMarkovian(m=3)
    K = FloorBox(0.1, 3)
    dt, N, n, x0, y = 0.05, 10, 50_000, 10.0, 0.1
    noise = sample_noise(11, n, 3, N, dt)
    path = model.path(noise, N * dt)
    v = np.abs(np.random.default_rng(2).normal(size=(1, 3)))
    delta = K.support_delta(v[0])
    X = np.full((n, 1), x0)
    Y = np.full((n, 1), y)
    zero = np.zeros((n, 3))
    for i, c in enumerate(path.coeffs):
        X, Y = step_wealth(X, zero, c, noise[:, :, i], dt), step_dual(Y, v, delta, c, noise[:, :, i], dt)
    prod = (X * Y).ravel()
    assert prod.mean() <= x0 * y + 3 * prod.std(ddof=1) / np.sqrt(n)


def test_heston_truncation_and_driver():
    model = HestonAugmented(nu0=0.01, xi=0.5, kappa=10.0, theta_nu=0.05)
    state = {"nu": np.array([[0.01]])}
    c = model.coefficients(state, 0.0)
    # pick dB so the Euler candidate is -0.001
    dt = 0.01
    target = -0.001
    drift = 0.01 + 10.0 * (0.05 - 0.01) * dt
    d0 = (target - drift) / (0.5 * 0.1 * -0.5)
    out = model.step_auxiliary(state, c, np.array([[d0, 0.0]]), dt, 0.0)
    assert out["nu"][0, 0] == 1e-5
    rho0 = HestonAugmented(rho=0.0)
    a = rho0.step_auxiliary({"nu": np.array([[0.5]])}, c, np.array([[5.0, 0.2]]), dt, 0.0)
    b = rho0.step_auxiliary({"nu": np.array([[0.5]])}, c, np.array([[-3.0, 0.2]]), dt, 0.0)
    assert a["nu"][0, 0] == b["nu"][0, 0]


def test_heston_invariants():
    model = HestonAugmented()
    noise = sample_noise(4, 500, 2, 30, 1 / 30)
    path = model.path(noise, 1.0)
    for f in path.features:
        assert np.all(f["nu"] >= 1e-5)
    with pytest.raises(ValueError):
        HestonAugmented(kappa=1.0, theta_nu=0.05, xi=0.5)


def test_vasicek_deterministic_limit():
    alpha, beta, r0, T, N = 5.0, 0.05, 0.1, 0.5, 400
    model = VasicekAugmented(base=DeterministicMarkovian(m=2, r_b=0.0), r0=r0, alpha=alpha, beta=beta, gamma=0.0)
    noise = sample_noise(0, 3, 3, N, T / N)
    path = model.path(noise, T)
    t_last = (N - 1) * T / N
    exact = beta + (r0 - beta) * np.exp(-alpha * t_last)
    r_last = path.features[-1]["r"]
    assert np.allclose(r_last, r_last[0])
    assert abs(r_last[0, 0] - exact) < 2 * alpha * (r0 - beta) * T / N


def test_vasicek_shapes():
    model = VasicekAugmented()
    assert (model.m_total, model.n_traded) == (31, 30)
    c = model.coefficients(model.initial_state(4), 0.0)
    assert c.theta.shape == (4, 31) and np.all(c.theta[:, -1] == 0)


def test_make_market_round_trip():
    for model in MODELS:
        assert make_market(model.to_dict()).to_dict() == model.to_dict()
    with pytest.raises(ValueError):
        make_market({"kind": "garch"})


@settings(max_examples=25, deadline=None)
@given(st.floats(-1, 1), st.floats(0.0, 0.2), st.floats(0.05, 0.5))
def test_deterministic_wealth_path_matches_ode(pi, r, sigma):
    c = const_coeffs(r, [r + 0.05], [[sigma]])
    X = np.ones((1, 1))
    for _ in range(20):
        X = step_wealth(X, np.array([[pi]]), c, np.zeros((1, 1)), 0.01)
    assert X[0, 0] == pytest.approx((1 + (r + pi * 0.05) * 0.01) ** 20, rel=1e-12)

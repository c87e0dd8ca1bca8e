import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from pfgtd import envs
from pfgtd.olo import project_ball
from pfgtd.envs import BAIRD_INIT, BatchSampler, make_env
from pfgtd.metrics import (
    AssumptionViolation, build_exact_model, duality_gap, lambda_max_power, rmspbe, smape,
    state_distribution, true_returns, truncation_bound,
)

ALL = sorted(envs.ENVIRONMENTS)
NONSINGULAR = [n for n in ALL if not n.startswith("baird")]


def _bellman_rmspbe(spec, theta):
    """Projected Bellman error from explicit Phi, Xi and Bellman operator matrices."""
    xi = state_distribution(spec)
    Phi = spec.features
    P = np.einsum("sa,sat->st", spec.target, spec.transition)
    r = np.sum(spec.target * spec.reward, axis=1)
    v = Phi @ theta
    err = r + spec.gamma * P @ v - v
    Xi = np.diag(xi)
    proj = Phi @ np.linalg.pinv(Phi.T @ Xi @ Phi) @ Phi.T @ Xi
    pe = proj @ err
    return math.sqrt(pe @ Xi @ pe)


@pytest.mark.parametrize("name", ALL)
def test_saddle_point_identities(name):
    m = build_exact_model(make_env(name))
    assert rmspbe(m, m.theta_star) < 1e-10
    np.testing.assert_allclose(m.y_star, 0, atol=1e-10)
    np.testing.assert_allclose(m.A @ m.theta_star, m.b, atol=1e-10)
    np.testing.assert_allclose(m.C, m.C.T)
    assert np.linalg.eigvalsh(m.C).min() > -1e-12
    assert m.xi.min() >= 0 and m.xi.sum() == pytest.approx(1.0)
    assert duality_gap(m, m.theta_star, m.y_star)[0] <= 1e-9
    assert lambda_max_power(m.M) == pytest.approx(m.lambda_max_M, abs=1e-8)


@pytest.mark.parametrize("name", ALL)
def test_rmspbe_matches_bellman_oracle(name):
    spec = make_env(name)
    m = build_exact_model(spec)
    rng = np.random.default_rng(0)
    thetas = [rng.standard_normal(spec.dim) for _ in range(5)]
    if name.startswith("baird"):
        thetas.append(BAIRD_INIT)
    for th in thetas:
        assert rmspbe(m, th) == pytest.approx(_bellman_rmspbe(spec, th), rel=1e-8, abs=1e-12)


def test_baird_model():
    m = build_exact_model(make_env("baird"))
    assert m.singular
    np.testing.assert_array_equal(m.b, 0)
    np.testing.assert_array_equal(m.theta_star, 0)
    assert rmspbe(m, BAIRD_INIT) > 0
    with pytest.raises(AssumptionViolation):
        build_exact_model(make_env("baird"), strict=True)


def test_neu_is_plain_norm():
    m = build_exact_model(make_env("boyan"), "neu")
    th = np.arange(4.0)
    assert rmspbe(m, th) == pytest.approx(np.linalg.norm(m.b - m.A @ th), rel=1e-12)


@pytest.mark.parametrize("name", NONSINGULAR)
def test_rmspbe_zero_iff_solution(name):
    m = build_exact_model(make_env(name))
    rng = np.random.default_rng(1)
    for _ in range(20):
        th = m.theta_star + rng.standard_normal(m.dim) * 10 ** rng.uniform(-4, 1)
        assert rmspbe(m, th) > 0


@pytest.mark.parametrize("name", ["random-walk-tabular", "boyan"])
def test_xi_matches_visitation(name):
    spec = make_env(name)
    xi = state_distribution(spec)
    s = BatchSampler(spec, range(200))
    counts = np.zeros(spec.n_states)
    for _ in range(2000):
        counts += np.bincount(s.sample().state, minlength=spec.n_states)
    np.testing.assert_allclose(counts / counts.sum(), xi, atol=0.01)


def _gap_oracle(m, theta, y, D):
    """Both inner optimizations of the gap solved numerically by SLSQP."""
    c = m.b - m.A @ theta
    res = minimize(lambda v: -(c @ v - 0.5 * v @ m.M @ v), np.zeros(m.dim),
                   jac=lambda v: -(c - m.M @ v),
                   constraints=[{"type": "ineq", "fun": lambda v: D * D - v @ v,
                                 "jac": lambda v: -2 * v}],
                   method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    upper = -res.fun
    a = m.A.T @ y
    res2 = minimize(lambda t: -(a @ t), np.zeros(m.dim), jac=lambda t: -a,
                    constraints=[{"type": "ineq", "fun": lambda t: D * D - t @ t,
                                  "jac": lambda t: -2 * t}],
                    method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    lower = m.b @ y - 0.5 * y @ m.M @ y + res2.fun
    return upper - lower


@pytest.mark.parametrize("name", ALL)
def test_gap_matches_optimizer_oracle(name):
    m = build_exact_model(make_env(name))
    rng = np.random.default_rng(2)
    D = 5.0
    for _ in range(5):
        th = rng.standard_normal(m.dim)
        y = rng.standard_normal(m.dim) * 0.3
        got = duality_gap(m, th, y, D)[0]
        assert got == pytest.approx(_gap_oracle(m, th, y, D), rel=1e-5, abs=1e-6)


def test_gap_y_zero_reduces_to_max():
    m = build_exact_model(make_env("random-walk-dependent"))
    th = np.array([0.3, -0.2, 0.1])
    c = m.b - m.A @ th
    y_hat = np.linalg.solve(m.M, c)
    assert duality_gap(m, th, np.zeros(3))[0] == pytest.approx(0.5 * c @ y_hat, rel=1e-12)


def test_gap_nonnegative_fuzz():
    rng = np.random.default_rng(3)
    for name in ALL:
        m = build_exact_model(make_env(name))
        n = 10_000 // len(ALL)
        th = rng.standard_normal((n, m.dim)) * 10 ** rng.uniform(-3, 1.5, (n, 1))
        y = rng.standard_normal((n, m.dim)) * 10 ** rng.uniform(-3, 1.5, (n, 1))
        g = duality_gap(m, project_ball(th, 100.0), project_ball(y, 100.0))
        assert np.all(g >= 0)


def test_gap_zero_only_near_saddle():
    for name in NONSINGULAR:
        m = build_exact_model(make_env(name))
        rng = np.random.default_rng(4)
        for _ in range(20):
            th = m.theta_star + rng.standard_normal(m.dim) * 1e-3
            y = rng.standard_normal(m.dim) * 1e-3
            assert duality_gap(m, th, y)[0] > 0


def test_gap_rejects_outside_ball():
    m = build_exact_model(make_env("boyan"))
    with pytest.raises(ValueError):
        duality_gap(m, np.full(4, 100.0), np.zeros(4))


def test_model_deterministic():
    a = build_exact_model(make_env("boyan")).to_json()
    b = build_exact_model(make_env("boyan")).to_json()
    assert a == b


def test_smape_examples():
    assert smape([1, 2, 3], [1, 2, 3]) == 0
    assert smape([0, 0], [1, -2]) == 1
    assert smape([1], [3]) == 0.5
    assert smape([0, 1], [0, 1]) == 0
    with pytest.raises(ValueError):
        smape([], [])
    with pytest.raises(ValueError):
        smape([1], [1, 2])


@settings(max_examples=100)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.integers(0, 10**6))
def test_smape_range(v, seed):
    g = np.random.default_rng(seed).standard_normal(len(v))
    assert 0 <= smape(v, g) <= 1


def test_true_returns():
    np.testing.assert_array_equal(true_returns(np.zeros(10), 0.9), 0)
    G = true_returns(np.ones(200), 0.5)
    assert G[0] == pytest.approx(2.0)
    r = np.random.default_rng(5).standard_normal((300, 2))
    brute = np.array([[sum(0.97 ** k * r[t + k, j] for k in range(300 - t)) for j in range(2)]
                      for t in range(300)])
    np.testing.assert_allclose(true_returns(r, 0.97), brute, rtol=1e-12, atol=1e-12)
    tb = truncation_bound(300, 0.97, 1.0)
    assert tb[-1] == pytest.approx(0.97 / 0.03) and np.all(np.diff(tb) > 0)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import bisect

from dpfcrn.errors import ConfigurationError
from dpfcrn.gmsolver import (CubicModel, SolverConfig, cubic_gradient, cubic_value,
                             direct_weighted_average, local_iterations, local_iterations_int, solve,
                             weighted_average_state)
from dpfcrn.model import BoxConstraint
from dpfcrn.rng import make_rng


def test_gradient_at_anchor_is_g():
    cm = CubicModel(np.array([0.1, -0.2]), np.array([0.3, 0.4]), np.eye(2) * 3, M=2.0, mu=1.0)
    np.testing.assert_array_equal(cubic_gradient(cm, cm.anchor), cm.g_hat)


def test_gradient_worked_example():
    cm = CubicModel(np.zeros(2), np.array([1.0, 0.0]), np.eye(2), M=6.0, mu=1.0)
    np.testing.assert_allclose(cubic_gradient(cm, np.array([1.0, 0.0])), [5.0, 0.0])


def test_gradient_matches_finite_differences():
    rng = make_rng(8)
    for _ in range(20):
        d = 4
        A = rng.normal(size=(d, d))
        cm = CubicModel(rng.uniform(-0.5, 0.5, d), rng.normal(size=d), A @ A.T, M=1.5, mu=1.0)
        theta = rng.uniform(-0.5, 0.5, d)
        g = cubic_gradient(cm, theta)
        h = 1e-5
        fd = np.array([(cubic_value(cm, theta + h * e) - cubic_value(cm, theta - h * e)) / (2 * h)
                       for e in np.eye(d)])
        assert np.linalg.norm(fd - g) <= 1e-4 * np.linalg.norm(g)


def test_callable_hessian_equivalent():
    rng = make_rng(1)
    H = np.diag([1.0, 2.0, 3.0])
    a = CubicModel(np.zeros(3), rng.normal(size=3), H, M=1.0, mu=1.0)
    b = CubicModel(np.zeros(3), a.g_hat, lambda r: H @ r, M=1.0, mu=1.0)
    box = BoxConstraint.cube(3)
    za = solve(a, box, SolverConfig(50, 0.2, make_rng(4)))
    zb = solve(b, box, SolverConfig(50, 0.2, make_rng(4)))
    np.testing.assert_array_equal(za, zb)


def test_tau_one_returns_anchor():
    cm = CubicModel(np.array([0.2, 0.1]), np.array([5.0, -5.0]), np.eye(2), M=1.0, mu=1.0)
    np.testing.assert_array_equal(solve(cm, BoxConstraint.cube(2), SolverConfig(1, 0.0)), cm.anchor)


def test_noiseless_quadratic_reaches_closed_form_minimizer():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    theta0 = np.array([0.1, -0.1])
    v_star = np.array([0.3, -0.2])
    g = H @ (theta0 - v_star)
    cm = CubicModel(theta0, g, H, M=1e-9, mu=float(np.linalg.eigvalsh(H).min()))
    np.testing.assert_allclose(theta0 - np.linalg.solve(H, g), v_star, atol=1e-15)
    gaps = []
    for tau in (10, 100, 1000, 10_000):
        z = solve(cm, BoxConstraint.cube(2), SolverConfig(tau, 0.0))
        gaps.append(cubic_value(cm, z) - cubic_value(cm, v_star))
    assert np.linalg.norm(z - v_star) <= 1e-3
    # suboptimality decays at least like C / tau
    for tau, gap in zip((10, 100, 1000, 10_000), gaps):
        assert gap <= gaps[0] * 10 / tau + 1e-12


def _cubic_root_1d(g, h, M, lo, hi):
    # stationarity of g t + h t^2/2 + M |t|^3 / 6 on [lo, hi]
    def dphi(t):
        return g + h * t + 0.5 * M * t * abs(t)

    if dphi(lo) >= 0:
        return lo
    if dphi(hi) <= 0:
        return hi
    return bisect(dphi, lo, hi, xtol=1e-14)


def test_noiseless_one_dimensional_cubic_matches_bisection():
    box = BoxConstraint.cube(1)
    t_star = _cubic_root_1d(1.0, 1.0, 6.0, -0.5, 0.5)
    assert t_star == pytest.approx((1 - math.sqrt(13)) / 6, abs=1e-12)
    cm = CubicModel(np.zeros(1), np.ones(1), np.ones((1, 1)), M=6.0, mu=1.0)
    z = solve(cm, box, SolverConfig(10_000, 0.0))
    assert abs(z[0] - t_star) <= 1e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(0.5, 3), st.floats(0.1, 10), st.floats(-0.4, 0.4))
def test_one_dimensional_cubic_random_instances(g, h, M, anchor):
    box = BoxConstraint.cube(1)
    lo, hi = -0.5 - anchor, 0.5 - anchor
    t_star = _cubic_root_1d(g, h, M, lo, hi)
    cm = CubicModel(np.array([anchor]), np.array([g]), np.array([[h]]), M=M, mu=h)
    z = solve(cm, box, SolverConfig(10_000, 0.0))
    assert abs(z[0] - anchor - t_star) <= 1e-3


def test_output_stays_in_box_under_noise():
    rng = make_rng(3)
    box = BoxConstraint.cube(6, 0.3)
    for seed in range(20):
        cm = CubicModel(box.uniform(rng), rng.normal(size=6) * 5, np.eye(6), M=1.0, mu=1.0)
        z = solve(cm, box, SolverConfig(30, 4.0, make_rng(seed)))
        assert box.contains(z)


def test_noiseless_descent_across_horizons():
    rng = make_rng(12)
    box = BoxConstraint.cube(5)
    for _ in range(10):
        A = rng.normal(size=(5, 5))
        H = A @ A.T / 5 + np.eye(5)
        cm = CubicModel(box.uniform(rng), rng.normal(size=5), H, M=1.0, mu=1.0)
        vals = [cubic_value(cm, solve(cm, box, SolverConfig(t, 0.0))) for t in (10, 100, 1000)]
        assert vals[0] >= vals[1] >= vals[2]


def test_weighted_average_examples():
    thetas = [np.array([0.0]), np.array([3.0]), np.array([6.0])]
    z = thetas[0]
    for s in range(1, 3):
        z = weighted_average_state(z, thetas[s], s + 1)
    assert z[0] == pytest.approx(4.0, abs=1e-15)
    assert direct_weighted_average(thetas)[0] == pytest.approx(4.0, abs=1e-15)
    c = np.array([0.25, -1.0])
    z = c
    for s in range(2, 50):
        z = weighted_average_state(z, c, s)
    np.testing.assert_allclose(z, c, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        weighted_average_state(c, c, 0)


@pytest.mark.parametrize("tau", [1, 2, 7, 100, 1000])
def test_weighted_average_recursion_equals_direct_sum(tau):
    thetas = make_rng(tau).normal(size=(tau, 3))
    z = thetas[0]
    for s in range(1, tau):
        z = weighted_average_state(z, thetas[s], s + 1)
    np.testing.assert_allclose(z, direct_weighted_average(thetas), rtol=1e-12, atol=1e-12)


def test_local_iterations_worked_example():
    raw = local_iterations(1.0, 1000, 10, 100, 0.01, 0.1, 1.0, 1.0, 0.1)
    assert raw == pytest.approx(0.042025e6 / (10 * 100 * math.log(100) * 0.04), rel=1e-12)
    assert local_iterations_int(1.0, 1000, 10, 100, 0.01, 0.1, 1.0, 1.0, 0.1) == 229
    doubled = local_iterations(1.0, 1000, 20, 100, 0.01, 0.1, 1.0, 1.0, 0.1)
    assert doubled == pytest.approx(raw / 2, rel=1e-15)
    assert local_iterations_int(1.0, 1000, 10, 100, 0.01, 0.1, 1.0, 1.0, 0.1, tau_max=50) == 50
    assert local_iterations_int(0.1, 10, 10, 100, 0.01, 0.1, 1.0, 1.0, 0.1) == 1


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(0, 0.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(3, -1.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(3, 0.5)
    with pytest.raises(ConfigurationError):
        CubicModel(np.zeros(2), np.zeros(2), np.eye(2), M=0.0, mu=1.0)

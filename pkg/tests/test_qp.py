import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from prosumer_bilevel.qp import QPSettings, residuals, solve_qp_batch


def test_unconstrained_quadratic():
    P = np.array([[[2.0, 0.0], [0.0, 4.0]]])
    q = np.array([[-2.0, -4.0]])
    A = np.eye(2)[None]
    res = solve_qp_batch(P, q, A, np.full((1, 2), -np.inf), np.full((1, 2), np.inf))
    assert res.converged.all()
    np.testing.assert_allclose(res.x, [[1.0, 1.0]], atol=1e-8)


def test_active_bound_and_multiplier_sign():
    # min (x - 2)^2 s.t. x <= 1: upper bound active, multiplier positive
    res = solve_qp_batch([[[2.0]]], [[-4.0]], [[[1.0]]], [[-np.inf]], [[1.0]])
    np.testing.assert_allclose(res.x, [[1.0]], atol=1e-9)
    assert res.y[0, 0] == pytest.approx(2.0, abs=1e-8)


def test_equality_row():
    # min x1^2 + x2^2 s.t. x1 + x2 = 1
    res = solve_qp_batch([2 * np.eye(2)], [[0.0, 0.0]], [[[1.0, 1.0]]], [[1.0]], [[1.0]])
    np.testing.assert_allclose(res.x, [[0.5, 0.5]], atol=1e-9)


def test_singular_hessian_linear_program():
    # P = 0: min -x1 - x2 on the box [0, 1]^2
    res = solve_qp_batch(np.zeros((1, 2, 2)), [[-1.0, -1.0]], np.eye(2)[None], np.zeros((1, 2)), np.ones((1, 2)))
    assert res.converged.all()
    np.testing.assert_allclose(res.x, [[1.0, 1.0]], atol=1e-8)


def test_residuals_flag_wrong_multiplier_sign():
    P, q, A = np.zeros((1, 1, 1)), np.zeros((1, 1)), np.ones((1, 1, 1))
    l, u = np.zeros((1, 1)), np.ones((1, 1))
    x = np.array([[0.5]])
    prim, dual = residuals(P, q, A, l, u, x, np.array([[0.3]]))
    assert prim[0] == 0.0 and dual[0] >= 0.3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_random_box_qps_match_reference(k, seed):
    rng = np.random.default_rng(seed)
    B = 3
    G = rng.normal(size=(B, k, k))
    P = G @ np.swapaxes(G, 1, 2) + 0.1 * np.eye(k)
    q = rng.normal(size=(B, k)) * 3
    A = np.broadcast_to(np.eye(k), (B, k, k)).copy()
    l, u = -np.ones((B, k)), np.ones((B, k))
    res = solve_qp_batch(P, q, A, l, u, QPSettings())
    assert res.converged.all()
    for b in range(B):
        ref = minimize(lambda z: 0.5 * z @ P[b] @ z + q[b] @ z, np.zeros(k),
                       jac=lambda z: P[b] @ z + q[b], bounds=[(-1, 1)] * k, method="L-BFGS-B",
                       options={"ftol": 1e-15, "gtol": 1e-12})
        f = 0.5 * res.x[b] @ P[b] @ res.x[b] + q[b] @ res.x[b]
        assert f <= ref.fun + 1e-8
    assert res.prim_res.max() <= 1e-8 and res.dual_res.max() <= 1e-8

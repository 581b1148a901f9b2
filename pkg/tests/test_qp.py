import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flightstack import qp
from flightstack.acceptance import _random_qp, brute_force_qp
from flightstack.control import AxisConstraints, Estimate, MpcController, mpc_axis_problem, mpc_model
from flightstack.tracking import ControlReference

LIM = AxisConstraints(-2.0, 2.0, 2.0, 5.0)


def constraint_violation(C, l, u, x):
    Cx = C @ x
    return float(max(0.0, (l - Cx).max(initial=0.0), (Cx - u).max(initial=0.0)))


def axis_problem(n, x0, lim=LIM):
    return mpc_axis_problem(0, x0, 0.0, lim, horizon=n)


# dense kernel


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(0, 6))
def test_kernel_matches_brute_force(seed, n, m):
    P, q, C, lo, hi = _random_qp(np.random.default_rng(seed), n, m)
    res = qp.QpSolver(P, C).solve(q, lo, hi)
    _, f_star = brute_force_qp(P, q, C, lo, hi)
    assert res.objective == pytest.approx(f_star, abs=1e-6 * max(1.0, abs(f_star)))
    assert constraint_violation(C, lo, hi, res.x) <= 1e-8


def test_unconstrained_kernel_is_newton_step():
    rng = np.random.default_rng(0)
    P, q, _, _, _ = _random_qp(rng, 6, 0)
    res = qp.QpSolver(P, np.zeros((0, 6))).solve(q, np.zeros(0), np.zeros(0))
    assert np.allclose(res.x, np.linalg.solve(P, -q), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dual_bound_below_primal(seed):
    P, q, C, lo, hi = _random_qp(np.random.default_rng(seed), 4, 5)
    res = qp.QpSolver(P, C).solve(q, lo, hi)
    assert qp.dual_objective(P, q, C, lo, hi, res.y) <= res.objective + 1e-7


# condensed MPC


def test_fixed_point_zero_input():
    sol = qp.qp_solve(axis_problem(40, [0.0, 0.0, 0.0]))
    assert np.abs(sol.u).max() <= 1e-12
    assert sol.cost == pytest.approx(0.0, abs=1e-12)


def test_dynamics_hold_exactly():
    p = axis_problem(10, [3.0, -1.0, 0.5])
    sol = qp.qp_solve(p)
    assert np.allclose(sol.states, qp.rollout(p, sol.u), atol=1e-12)
    assert sol.cost == pytest.approx(qp.mpc_cost(p, sol.u), rel=1e-9)


def test_unconstrained_matches_kkt_oracle():
    A, B = mpc_model()
    n = 4
    p = qp.MpcProblem(A, B, n, [500.0, 100.0, 100.0], [1000.0, 300.0, 300.0], [1.0, 0.3, -0.2], [0.0, 0.0, 0.0])
    # dense least squares over the stacked predictions
    G = np.zeros((n * 3, n))
    F = np.zeros((n * 3, 3))
    Ai = np.eye(3)
    for i in range(n):
        for j in range(i + 1):
            G[3 * i:3 * i + 3, j] = np.linalg.matrix_power(A, i - j) @ B
        Ai = A @ Ai
        F[3 * i:3 * i + 3] = Ai
    w = np.concatenate([p.Q] * (n - 1) + [2 * p.S])
    u = np.linalg.solve(G.T @ (w[:, None] * G), -G.T @ (w * (F @ p.x0)))
    assert np.allclose(qp.qp_solve(p).u, u, atol=1e-6)


@pytest.mark.parametrize("x0", [[1.0, 0.0, 0.0], [-0.6, 1.5, 1.0], [0.4, -1.9, 0.0]])
def test_tight_acceleration_matches_brute_force(x0):
    p = axis_problem(4, x0, AxisConstraints(-2.0, 2.0, 0.5, 5.0))
    P, q, C, lo, hi, const, *_ = qp.qp_data(p)
    _, f_star = brute_force_qp(P, q, C, lo, hi)
    sol = qp.qp_solve(p)
    assert sol.cost == pytest.approx(f_star + const, abs=1e-6 * max(1.0, abs(f_star + const)))
    assert np.abs(sol.states[:, 2]).max() <= 0.5 + 1e-8


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.floats(-5, 5), st.floats(-1.9, 1.9), st.floats(-1.9, 1.9))
def test_mpc_matches_cvxpy(n, p0, v0, a0):
    cp = pytest.importorskip("cvxpy")
    prob = axis_problem(n, [p0, v0, a0])
    P, q, C, lo, hi, const, *_ = qp.qp_data(prob)
    x = cp.Variable(P.shape[0])
    cons = []
    for i in range(C.shape[0]):
        if math.isfinite(lo[i]):
            cons.append(C[i] @ x >= lo[i])
        if math.isfinite(hi[i]):
            cons.append(C[i] @ x <= hi[i])
    ref = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + q @ x), cons)
    ref.solve(solver=cp.CLARABEL)
    if ref.status != cp.OPTIMAL:
        return
    sol = qp.qp_solve(prob)
    assert sol.cost - const == pytest.approx(ref.value, abs=1e-6 * max(1.0, abs(ref.value)))
    assert constraint_violation(C, lo, hi, sol.qp.x) <= 1e-8


def test_warm_start_consistency():
    p = axis_problem(40, [5.0, 0.0, 0.0])
    cold = qp.qp_solve(p)
    warm = qp.qp_solve(p, cold)
    assert np.abs(warm.u - cold.u).max() <= 1e-9


@pytest.mark.parametrize("kw", [
    dict(n=1),
    dict(Q=[-1.0, 0.0, 0.0]),
    dict(x_min=[0.0, 0.0, 0.0], x_max=[-1.0, 1.0, 1.0]),
    dict(u_min=1.0, u_max=-1.0),
    dict(du_max=-1.0),
    dict(x0=[math.nan, 0.0, 0.0]),
])
def test_invalid_problem(kw):
    A, B = mpc_model()
    args = dict(A=A, B=B, n=4, Q=[1.0, 1.0, 1.0], S=[1.0, 1.0, 1.0], x0=[0.0, 0.0, 0.0], ref=[0.0, 0.0, 0.0])
    args.update(kw)
    with pytest.raises(qp.InvalidProblem):
        qp.MpcProblem(**args)


def test_point_mass_recovery_respects_limits():
    ctrl = MpcController()
    chi = ControlReference()
    p, v, a = np.array([5.0, 0.0, 0.0]), np.zeros(3), np.zeros(3)
    vmax = amax = 0.0
    for _ in range(1000):
        a = ctrl.acceleration_correction(chi, Estimate(p, v, a))
        p = p + 0.01 * v + 0.5e-4 * a
        v = v + 0.01 * a
        vmax = max(vmax, np.abs(v).max())
        amax = max(amax, np.abs(a).max())
    assert vmax <= 2.0 + 1e-3
    assert amax <= 2.0 + 1e-3
    assert np.linalg.norm(p) < 0.01
    assert ctrl.fallbacks == 0

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flightstack import geometry as geo
from flightstack import tracking as trk
from flightstack.config import ConstraintGroup
from flightstack.harness.scenario import FIG5, circle_trajectory
from flightstack.qp import MpcProblem, mpc_cost, qp_solve

FAST = ConstraintGroup(name="fig5", **FIG5)


def run_tracker(tracker, setpoint, seconds, t0=0.0):
    out = []
    for i in range(int(round(seconds / trk.TICK))):
        out.append(tracker.step(setpoint, t0 + i * trk.TICK))
    return out


# MPC tracker


def test_stationary_setpoint():
    tr = trk.MpcTracker(ConstraintGroup())
    tr.reset([1.0, 2.0, 3.0], 0.4)
    for chi in run_tracker(tr, trk.TrajectorySetpoint.point([1.0, 2.0, 3.0], 0.4), 1.0):
        assert np.allclose(chi.position, [1.0, 2.0, 3.0], atol=1e-12)
        assert np.abs(np.concatenate((chi.velocity, chi.acceleration, chi.jerk))).max() <= 1e-9
        assert chi.heading == pytest.approx(0.4, abs=1e-12)


def test_forty_meter_step():
    tr = trk.MpcTracker(FAST)
    tr.reset([0.0, 0.0, 3.0])
    refs = run_tracker(tr, trk.TrajectorySetpoint.point([40.0, 0.0, 3.0]), 12.0)
    v = np.array([c.velocity[0] for c in refs])
    a = np.array([c.acceleration[0] for c in refs])
    assert np.abs(v).max() <= 9.0 + 1e-6
    assert np.abs(a).max() <= 12.0 + 1e-6
    assert v.max() > 8.5
    assert abs(refs[-1].position[0] - 40.0) < 1e-3
    assert all(not trk.check_reference_constraints(c, FAST) for c in refs)


@pytest.mark.parametrize("target", [[3.0, 0.0, 2.0], [0.0, -2.0, 2.0], [0.0, 0.0, 4.0], [10.0, 0.0, 2.0]])
def test_step_converges_monotonically(target):
    tr = trk.MpcTracker(ConstraintGroup())
    tr.reset([0.0, 0.0, 2.0])
    refs = run_tracker(tr, trk.TrajectorySetpoint.point(target), 12.0)
    err = np.array([np.linalg.norm(c.position - target) for c in refs])
    assert err[-1] < 1e-3
    # minimum-time profile with a cruise phase: d/v + v/a + a/j
    d = np.abs(np.subtract(target, [0.0, 0.0, 2.0])).max()
    v, a, j, _ = ConstraintGroup().axis_limits("v" if target[2] != 2.0 else "h")
    t_min = d / v + v / a + a / j
    # the quadratic-cost tail is exponential: 1 cm within +50 %, 1 mm within 2x
    assert np.argmax(err < 1e-2) * trk.TICK <= 1.5 * t_min
    assert np.argmax(err < 1e-3) * trk.TICK <= 2.0 * t_min
    # no overshoot: the distance to the setpoint never grows
    assert np.all(np.diff(err) <= 1e-9)


def test_heading_setpoint_reached():
    tr = trk.MpcTracker(ConstraintGroup())
    tr.reset([0.0, 0.0, 2.0], 3.0)
    refs = run_tracker(tr, trk.TrajectorySetpoint.point([0.0, 0.0, 2.0], -3.0), 6.0)
    assert abs(geo.angle_diff(refs[-1].heading, -3.0)) < 1e-3
    # shortest arc: through +pi, never back through zero
    assert all(abs(c.heading) > 2.9 for c in refs)


def test_position_velocity_consistency():
    tr = trk.MpcTracker(ConstraintGroup())
    tr.reset([0.0, 0.0, 2.0])
    refs = run_tracker(tr, trk.TrajectorySetpoint.point([5.0, 3.0, 3.0]), 6.0)
    p = np.array([c.position for c in refs])
    v = np.array([c.velocity for c in refs])
    fd = np.diff(p, axis=0) / trk.TICK
    mid = 0.5 * (v[1:] + v[:-1])
    assert np.abs(fd - mid).max() <= ConstraintGroup().horizontal_jerk * trk.TICK


@settings(max_examples=15, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 10))
def test_reference_always_within_constraints(x, y, z):
    cg = ConstraintGroup()
    tr = trk.MpcTracker(cg)
    tr.reset([0.0, 0.0, 2.0])
    for chi in run_tracker(tr, trk.TrajectorySetpoint.point([x, y, z], 2.0), 3.0):
        assert not trk.check_reference_constraints(chi, cg)
        assert chi.is_finite()


def _grid_oracle(A, B, Q, S, x0, ref, n, jerks, v_max, a_max):
    # exhaustive search over a jerk grid, states propagated for all sequences at once
    seqs = np.array(list(itertools.product(jerks, repeat=n)))
    x = np.tile(x0, (len(seqs), 1))
    cost = np.zeros(len(seqs))
    ok = np.ones(len(seqs), dtype=bool)
    for i in range(n):
        x = x @ A.T + np.outer(seqs[:, i], B)
        ok &= (np.abs(x[:, 1]) <= v_max + 1e-12) & (np.abs(x[:, 2]) <= a_max + 1e-12)
        e = x - ref
        w = Q if i < n - 1 else 2.0 * S
        cost += 0.5 * (e * e) @ w
    return cost[ok].min()


def test_tracker_qp_against_grid_oracle():
    n, j_max = 5, 5.0
    A, B = trk.jerk_model(0.2)
    Q, S = trk.MpcTracker.Q, trk.MpcTracker.S
    x0 = np.zeros(3)
    ref = np.array([1.0, 0.0, 0.0])
    prob = MpcProblem(A, B, n, Q, S, x0, ref, x_min=[-math.inf, -2.0, -2.0], x_max=[math.inf, 2.0, 2.0],
                      u_min=-j_max, u_max=j_max)
    sol = qp_solve(prob)
    oracle = _grid_oracle(A, B, Q, S, x0, ref, n, np.linspace(-j_max, j_max, 21), 2.0, 2.0)
    assert sol.cost <= oracle + 1e-9
    assert oracle <= 1.02 * sol.cost
    assert sol.cost == pytest.approx(mpc_cost(prob, sol.u), rel=1e-9)


def test_circle_centripetal_acceleration():
    traj = circle_trajectory([0.0, 0.0, 3.0], 5.0, 7.0, 3.0, "center")
    tr = trk.MpcTracker(FAST)
    tr.reset([5.0, 0.0, 3.0], math.pi)
    refs = run_tracker(tr, traj, traj.duration)
    # skip the speed ramp and stay a horizon away from the end of the trajectory
    steady = refs[int(6.0 / trk.TICK):int((traj.duration - 8.0) / trk.TICK)]
    radius = np.array([np.linalg.norm(c.position[:2]) for c in steady])
    assert np.abs(radius - 5.0).max() < 0.1
    acc = np.array([np.linalg.norm(c.acceleration[:2]) for c in steady])
    assert np.mean(acc) == pytest.approx(7.0 ** 2 / 5.0, rel=0.05)


def test_tracker_frame_transform_keeps_heading_continuous():
    from flightstack.estimation import FrameTransform
    tr = trk.MpcTracker(ConstraintGroup())
    tr.reset([0.0, 0.0, 2.0], 3.0)
    tr.transform(FrameTransform(np.array([5.0, 0.0, 0.0]), 0.5))
    assert np.allclose(tr.state.reference().position, [5.0, 0.0, 2.0])
    assert tr.state.heading.p == pytest.approx(3.5)


# landoff


def test_pinned_takeoff_respects_admittance():
    lt = trk.LandoffTracker(admittance_radius=0.5)
    lt.start_takeoff([0.0, 0.0, 0.0], 0.0, 3.0)
    for _ in range(1000):
        chi = lt.step([0.0, 0.0, 0.0])
        assert chi.position[2] <= 0.5 + 1e-12
    assert lt.saturated
    assert not lt.takeoff_complete


def test_free_takeoff_reaches_target():
    lt = trk.LandoffTracker()
    lt.start_takeoff([1.0, 2.0, 0.0], 0.3, 3.0)
    est = np.array([1.0, 2.0, 0.0])
    for _ in range(2000):
        chi = lt.step(est)
        est = chi.position.copy()
    assert chi.position[2] == pytest.approx(3.0, abs=0.05)
    assert lt.takeoff_complete
    assert np.allclose(chi.position[:2], [1.0, 2.0])


def test_landing_reference_stays_below_estimate():
    lt = trk.LandoffTracker(landing_offset=0.5)
    lt.start_landing([0.0, 0.0, 2.0], 0.0)
    z = []
    for _ in range(500):
        chi = lt.step([0.0, 0.0, 2.0])
        assert chi.velocity[2] <= 0.0
        z.append(chi.position[2])
    assert np.all(np.diff(z) <= 0.0)
    # a vehicle that does not descend keeps the reference a fixed offset below it
    assert z[-1] == pytest.approx(1.5, abs=1e-12)


def test_invalid_admittance_radius():
    with pytest.raises(ValueError):
        trk.LandoffTracker(admittance_radius=0.0)


# speed tracker


def test_speed_tracker_converges():
    st_ = trk.SpeedTracker(cutoff_hz=1.0)
    tau = 1.0 / (2 * math.pi)
    cmd = trk.SpeedCommand([1.0, 0.0], 2.0, 0.5)
    for _ in range(int(5 * tau / trk.TICK) + 1):
        chi = st_.step(cmd)
    assert np.allclose(chi.velocity[:2], [1.0, 0.0], atol=math.exp(-5) + 1e-3)
    assert chi.position[2] == 2.0
    assert chi.heading == 0.5
    assert list(chi.mask) == [False, False, True]


def test_speed_tracker_step_response_is_first_order():
    st_ = trk.SpeedTracker(cutoff_hz=0.5)
    tau = 1.0 / (2 * math.pi * 0.5)
    cmd = trk.SpeedCommand([2.0, 0.0], 1.0, 0.0)
    v = [st_.step(cmd).velocity[0] for _ in range(300)]
    t = trk.TICK * np.arange(1, 301)
    assert np.allclose(v, 2.0 * (1.0 - np.exp(-t / tau)), atol=1e-12)
    # slope never exceeds the initial one, 2 / tau
    assert np.diff(np.concatenate(([0.0], v))).max() / trk.TICK <= 2.0 / tau + 1e-9


def test_speed_tracker_acceleration_cap():
    st_ = trk.SpeedTracker(cutoff_hz=5.0, max_acceleration=2.0)
    cmd = trk.SpeedCommand([3.0, 4.0], 1.0, 0.0)
    for _ in range(400):
        chi = st_.step(cmd)
        assert np.linalg.norm(chi.acceleration[:2]) <= 2.0 + 1e-9
    assert np.allclose(chi.velocity[:2], [3.0, 4.0], atol=1e-3)


# trajectories


def test_resample_midpoint():
    traj = trk.TrajectorySetpoint([[0.0, 0.0, 0.0], [2.0, 4.0, 6.0]], [0.0, 0.0], period=1.0)
    times, pos, _ = trk.resample_trajectory(traj, tick=0.5)
    assert np.array_equal(times, [0.0, 0.5, 1.0])
    assert np.array_equal(pos[1], [1.0, 2.0, 3.0])


def test_resample_heading_shortest_arc():
    traj = trk.TrajectorySetpoint(np.zeros((2, 3)), [3.0, -3.0], period=1.0)
    _, _, hdg = trk.resample_trajectory(traj, tick=0.01)
    assert np.all(np.abs(hdg) >= 3.0 - 1e-12)
    assert abs(geo.angle_diff(hdg[50], math.pi)) < 1e-12


def test_sample_holds_last_point():
    traj = trk.TrajectorySetpoint([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [0.0, 1.0], period=0.5, t0=2.0)
    pos, hdg = traj.sample(10.0)
    assert np.array_equal(pos, [1.0, 0.0, 0.0]) and hdg == 1.0
    pos, _ = traj.sample(0.0)
    assert np.array_equal(pos, [0.0, 0.0, 0.0])


@given(st.floats(-1.0, 5.0))
def test_sample_many_matches_sample(t):
    traj = trk.TrajectorySetpoint([[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, 2.0, 1.0]], [3.0, -3.0, 0.0],
                                  period=1.5)
    pos, hdg = traj.sample_many([t])
    p1, h1 = traj.sample(t)
    assert np.allclose(pos[0], p1, atol=1e-12)
    assert abs(geo.angle_diff(hdg[0], h1)) < 1e-12


def test_empty_trajectory():
    with pytest.raises(trk.EmptyTrajectory):
        trk.TrajectorySetpoint(np.zeros((0, 3)), [])

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flightstack import control as ctl
from flightstack import geometry as geo
from flightstack.attitude import DisturbanceState, ForceCommand, hover_thrust
from flightstack.config import ConstraintGroup
from flightstack.simulator import VehicleParams
from flightstack.tracking import ControlReference

P = VehicleParams()
M, G = P.m, P.g


def at_rest(position=(0.0, 0.0, 2.0)):
    return ctl.Estimate(position, np.zeros(3))


# SE(3)


def test_se3_hover_fixed_point():
    chi = ControlReference([0.0, 0.0, 2.0])
    fc = ctl.se3_desired_force(chi, at_rest(), DisturbanceState(M), ctl.PositionGains())
    assert np.array_equal(fc.f_d, [0.0, 0.0, M * G])


def test_se3_position_error_example():
    chi = ControlReference()
    est = ctl.Estimate([1.0, 0.0, 0.0], np.zeros(3))
    fc = ctl.se3_desired_force(chi, est, DisturbanceState(3.5), ctl.PositionGains(k_p=[6.0, 6.0, 6.0]))
    assert np.allclose(fc.f_d, [-21.0, 0.0, 34.335], atol=1e-12)


def test_se3_wind_compensation_term():
    ds = DisturbanceState(M, d_w=[0.6, 0.0, 0.0], body_sum=[0.4, 0.0, 0.0])
    fc = ctl.se3_desired_force(ControlReference([0.0, 0.0, 2.0]), at_rest(), ds, ctl.PositionGains())
    assert np.allclose(fc.terms["disturbance"], [-1.0, 0.0, 0.0])
    assert fc.f_d[0] == pytest.approx(-1.0)


def test_se3_passes_reference_through():
    chi = ControlReference(jerk=[1.0, 2.0, 3.0], heading=0.5, heading_rate=0.2)
    fc = ctl.se3_desired_force(chi, at_rest([0.0, 0.0, 0.0]), DisturbanceState(M), ctl.PositionGains())
    assert fc.heading == 0.5 and fc.heading_rate == 0.2
    assert np.array_equal(fc.jerk, [1.0, 2.0, 3.0])


def test_se3_masked_axes_ignore_position():
    chi = ControlReference(mask=[False, False, True])
    fc = ctl.se3_desired_force(chi, ctl.Estimate([7.0, -3.0, 0.0], np.zeros(3)), DisturbanceState(M),
                               ctl.PositionGains())
    assert fc.f_d[0] == 0.0 and fc.f_d[1] == 0.0


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(1.0, 100.0))
def test_tilt_limit(fx, fy, fz):
    out = ctl.limit_tilt(np.array([fx, fy, fz]), math.radians(45.0))
    assert math.hypot(out[0], out[1]) <= out[2] * math.tan(math.radians(45.0)) + 1e-9
    assert out[2] == fz


# MPC


def test_mpc_default_penalties():
    assert np.array_equal(ctl.MPC_Q[:3], [500.0, 100.0, 100.0])
    assert np.array_equal(ctl.MPC_S[:3], [1000.0, 300.0, 300.0])
    c = ctl.MpcController()
    assert np.array_equal(c.Q, ctl.MPC_Q) and np.array_equal(c.S, ctl.MPC_S)
    assert c.horizon == 40 and c.dt == 0.05


def test_mpc_at_reference_is_hover():
    fc = ctl.mpc_desired_force(ControlReference([0.0, 0.0, 2.0]), at_rest(), DisturbanceState(M))
    assert np.allclose(fc.terms["mpc"], 0.0, atol=1e-12)
    assert np.allclose(fc.f_d, [0.0, 0.0, M * G], atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.lists(st.floats(-6, 6), min_size=3, max_size=3),
       st.lists(st.floats(-8, 8), min_size=3, max_size=3))
def test_mpc_output_bounded(p, v, a):
    ctrl = ctl.MpcController()
    c_d = ctrl.acceleration_correction(ControlReference(), ctl.Estimate(p, v, a))
    for k, lim in enumerate(ctrl.limits):
        assert abs(c_d[k]) <= lim.a_max + 1e-6


def test_mpc_noisy_estimates_bounded():
    rng = np.random.default_rng(5)
    ctrl = ctl.MpcController()
    chi = ControlReference([0.0, 0.0, 2.0])
    prev = np.zeros(3)
    for _ in range(300):
        est = ctl.Estimate([0.0, 0.0, 2.0] + 2.0 * rng.standard_normal(3), 2.0 * rng.standard_normal(3))
        c_d = ctrl.acceleration_correction(chi, est)
        assert np.abs(c_d[:2]).max() <= 2.0 + 1e-6
        assert abs(c_d[2]) <= 1.0 + 1e-6
        prev = c_d
    assert ctrl.fallbacks == 0
    assert np.isfinite(prev).all()


def test_initial_state_substitutes_reference_when_infeasible():
    lim = ctl.AxisConstraints(-2.0, 2.0, 2.0, 5.0)
    chi = ControlReference(velocity=[1.0, 0.0, 0.0], acceleration=[0.5, 0.0, 0.0])
    x0 = ctl.initial_mpc_state(0, chi, ctl.Estimate([0.3, 0, 0], [5.0, 0, 0], [0.0, 0, 0]), lim, 0.05)
    assert np.array_equal(x0, [0.3, 0.0, 0.0])
    x0 = ctl.initial_mpc_state(0, chi, ctl.Estimate([0.3, 0, 0], [1.5, 0, 0], [0.7, 0, 0]), lim, 0.05)
    assert np.allclose(x0, [0.3, 0.5, 0.2])


def test_axis_constraints_from_group():
    cg = ConstraintGroup(vertical_ascending_speed=3.0, vertical_descending_speed=1.5)
    hx, hy, vz = ctl.controller_axis_constraints(cg)
    assert (hx.v_min, hx.v_max, hx.a_max, hx.jerk) == (-2.0, 2.0, 2.0, 5.0)
    assert (vz.v_min, vz.v_max) == (-1.5, 3.0)


# failsafe


def test_failsafe_initial_thrust_is_hover():
    ds = DisturbanceState(M)
    assert ctl.failsafe_command(ds, 0.0, P).thrust == pytest.approx(hover_thrust(ds.m_e, P), abs=1e-15)


def test_failsafe_schedule():
    ds = DisturbanceState(M)
    cfg = ctl.FailsafeConfig(k_fs=0.05)
    assert ctl.failsafe_thrust(M, 2.0, P, cfg) == pytest.approx(hover_thrust(M, P) - 0.10, abs=1e-12)
    assert ctl.failsafe_thrust(M, 100.0, P, cfg) == cfg.t_min
    thrusts = [ctl.failsafe_command(ds, t, P, cfg=cfg).thrust for t in np.linspace(0, 20, 50)]
    assert np.all(np.diff(thrusts) <= 0.0)


def test_failsafe_levels_attitude():
    R = geo.rot_z(0.8) @ geo.rot_x(0.3) @ geo.rot_y(-0.2)
    cmd = ctl.failsafe_command(DisturbanceState(M), 0.0, P, R)
    assert cmd.omega_d[2] == 0.0
    # one short rate step reduces the tilt without touching the heading
    R1 = R @ geo.expm_so3(0.01 * cmd.omega_d)
    assert geo.tilt_angle(R1) < geo.tilt_angle(R)


def test_failsafe_controller_seeded_with_mass():
    fs = ctl.FailsafeController(P)
    ds = DisturbanceState(M, d_w=[0.0, 0.0, -1.0])
    fs.activate(3.0, ds)
    ds.d_w[2] = 5.0
    assert fs.ds.m_e == pytest.approx(M + 1.0 / G)
    assert fs.command(3.0, np.eye(3)).thrust == pytest.approx(hover_thrust(M + 1.0 / G, P), abs=1e-12)


# handover


def test_handover_se3_to_mpc_is_continuous():
    chi = ControlReference([0.0, 0.0, 2.0])
    est = ctl.Estimate([0.05, -0.02, 1.97], [0.1, 0.0, -0.05])
    ds = DisturbanceState(M)
    se3 = ctl.Se3Controller()
    last = se3.update(chi, est, ds)
    mpc = ctl.controller_handover(last, ctl.MpcController(), chi, est, ds)
    first = mpc.update(chi, est, ds)
    assert np.abs(first.f_d - last.f_d).max() <= 1e-3
    # the offset decays toward the MPC's own law
    for _ in range(500):
        out = mpc.update(chi, est, ds)
    assert not mpc.offset.any()
    assert np.allclose(out.f_d, mpc.desired_force(chi, est, ds).f_d, atol=1e-9)


def test_handover_without_previous_output():
    ctrl = ctl.controller_handover(None, ctl.Se3Controller(), ControlReference(), at_rest(), DisturbanceState(M))
    assert not ctrl.offset.any()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flightstack import attitude as att
from flightstack import geometry as geo
from flightstack.simulator import VehicleParams

P = VehicleParams()
M, G = P.m, P.g


def hover_force(m=M):
    return att.ForceCommand(np.array([0.0, 0.0, m * G]))


# attitude command


def test_hover_fixed_point():
    cmd = att.attitude_command(hover_force(), np.eye(3), M, att.AttitudeGains(), P)
    assert not cmd.omega_d.any()
    assert cmd.thrust == pytest.approx(P.hover_thrust(), abs=1e-12)


@pytest.mark.parametrize("m_e", [3.0, 3.5, 3.7])
def test_hover_thrust_uses_mass_estimate(m_e):
    cmd = att.attitude_command(hover_force(m_e), np.eye(3), m_e, att.AttitudeGains(), P)
    assert cmd.thrust == pytest.approx(P.a_t * math.sqrt(m_e * G) + P.b_t, abs=1e-12)
    assert att.hover_thrust(m_e, P) == pytest.approx(cmd.thrust, abs=1e-15)


def test_pure_heading_error():
    gains = att.AttitudeGains(k_R=[1.0, 1.0, 1.0])
    cmd = att.attitude_command(hover_force(), geo.rot_z(0.1), M, gains, P)
    assert np.allclose(cmd.omega_d, [0.0, 0.0, -math.sin(0.1)], atol=1e-12)


def test_heading_rate_feedforward_level():
    fc = hover_force()
    fc.heading_rate = 0.4
    cmd = att.attitude_command(fc, np.eye(3), M, att.AttitudeGains(), P)
    assert cmd.omega_d[2] == pytest.approx(0.4, abs=1e-12)


def test_degenerate_force():
    with pytest.raises(geo.DegenerateForce):
        att.attitude_command(att.ForceCommand(np.zeros(3)), np.eye(3), M, att.AttitudeGains(), P)


def test_unknown_construction():
    with pytest.raises(ValueError):
        att.desired_orientation(hover_force(), "euler")


def _accel(t):
    # smooth, jerk-rich horizontal acceleration profile
    return np.array([3.0 * math.sin(1.3 * t), 2.0 * math.cos(0.7 * t), 1.0 * math.sin(2.1 * t)])


def _jerk(t):
    return np.array([3.9 * math.cos(1.3 * t), -1.4 * math.sin(0.7 * t), 2.1 * math.cos(2.1 * t)])


def test_jerk_feedforward_matches_finite_difference():
    h = 1e-5
    for t in np.linspace(0.0, 5.0, 26):
        f = M * (_accel(t) + G * geo.E3)
        R_d = geo.desired_orientation_heading_compliant(f, 0.3)
        Rp = geo.desired_orientation_heading_compliant(M * (_accel(t + h) + G * geo.E3), 0.3)
        Rm = geo.desired_orientation_heading_compliant(M * (_accel(t - h) + G * geo.E3), 0.3)
        w_fd = geo.vee(0.5 * (R_d.T @ (Rp - Rm) / (2 * h) - ((Rp - Rm) / (2 * h)).T @ R_d))
        w_j = att.jerk_feedforward(f, R_d, _jerk(t), M)
        # the jerk feedforward tilts the thrust axis; the yaw part belongs to the heading loop
        assert np.abs(w_j[:2] - w_fd[:2]).max() <= 1e-3


@settings(max_examples=300, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(0.0, math.radians(60.0)), st.floats(-math.pi, math.pi),
       st.floats(1.0, 80.0))
def test_compliant_command_keeps_heading(az, tilt, eta, mag):
    f = mag * np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])
    R_d = att.desired_orientation(att.ForceCommand(f, eta))
    assert abs(geo.angle_diff(geo.heading_of(R_d), eta)) <= 1e-9


# disturbance integrators


def test_zero_error_keeps_integrators():
    ds = att.DisturbanceState(M)
    for _ in range(100):
        ds = att.disturbance_update(ds, np.zeros(3), 0.3, 0.01, att.AttitudeGains())
    assert not ds.d_w.any() and not ds.body_sum.any()
    assert ds.m_e == M


def test_integration_and_split():
    gains = att.AttitudeGains(k_iw=[1.0, 1.0, 1.0], k_ib=[1.0, 1.0, 0.0])
    ds = att.DisturbanceState(M)
    for _ in range(100):
        ds = att.disturbance_update(ds, [0.2, -0.1, 0.0], 0.0, 0.01, gains)
    assert np.allclose(ds.d_w, [0.2, -0.1, 0.0], atol=1e-12)
    # equal gains and a constant heading split the estimate equally
    assert np.allclose(ds.d_b, ds.d_w, atol=1e-12)


def test_body_integrator_follows_heading():
    gains = att.AttitudeGains(k_iw=[0.0, 0.0, 0.0], k_ib=[1.0, 1.0, 0.0])
    ds = att.disturbance_update(att.DisturbanceState(M), [1.0, 0.0, 0.0], 0.0, 1.0, gains)
    assert np.allclose(ds.d_b, [1.0, 0.0, 0.0])
    # a heading change rotates the stored body estimate with the vehicle
    ds = att.disturbance_update(ds, [0.0, 0.0, 0.0], math.pi / 2, 1.0, gains)
    assert np.allclose(ds.d_b, [0.0, 1.0, 0.0], atol=1e-12)


def test_mass_estimate_from_vertical_error():
    gains = att.AttitudeGains(k_iw=[0.0, 0.0, 1.0])
    # sagging by 0.1 m for 1 s integrates -0.1 N
    ds = att.disturbance_update(att.DisturbanceState(M), [0.0, 0.0, -0.1], 0.0, 1.0, gains)
    assert ds.m_e == pytest.approx(M + 0.1 / G, abs=1e-12)


def test_mask_and_freeze_mass():
    gains = att.AttitudeGains()
    ds = att.disturbance_update(att.DisturbanceState(M), [1.0, 1.0, 1.0], 0.0, 0.01, gains,
                                mask=[True, False, True], freeze_mass=True)
    assert ds.d_w[1] == 0.0 and ds.d_w[2] == 0.0 and ds.d_w[0] > 0.0
    assert ds.m_e == M


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=30),
       st.floats(-math.pi, math.pi))
def test_integrators_saturate(errors, heading):
    ds = att.DisturbanceState(M)
    for e in errors:
        ds = att.disturbance_update(ds, e, heading, 0.1, att.AttitudeGains())
        assert np.abs(ds.d_w).max() <= ds.limit
        assert np.abs(ds.body_sum).max() <= ds.limit
        assert ds.m_e > 0.0


def test_invalid_dt():
    with pytest.raises(ValueError):
        att.disturbance_update(att.DisturbanceState(M), np.zeros(3), 0.0, 0.0, att.AttitudeGains())


def test_negative_gain_rejected():
    with pytest.raises(ValueError):
        att.AttitudeGains(k_R=[-1.0, 1.0, 1.0])


# unbiased acceleration and apparent mass


def test_unbiased_acceleration_hover():
    a = att.unbiased_acceleration([0.0, 0.0, M * G], np.eye(3), att.DisturbanceState(M))
    assert np.allclose(a, 0.0, atol=1e-15)


def test_unbiased_acceleration_wind_compensated():
    # 1 N of +x wind fully absorbed by the world integrator
    ds = att.DisturbanceState(M, d_w=[1.0, 0.0, 0.0])
    f_d = np.array([-1.0, 0.0, M * G])
    R = geo.desired_orientation_heading_compliant(f_d, 0.0)
    assert geo.tilt_angle(R) > 0.01
    assert np.allclose(att.unbiased_acceleration(f_d, R, ds), 0.0, atol=1e-12)


def test_unbiased_acceleration_is_commanded_acceleration():
    acc = np.array([1.0, -0.5, 0.3])
    f_d = M * (acc + G * geo.E3)
    R = geo.desired_orientation_heading_compliant(f_d, 0.7)
    assert np.allclose(att.unbiased_acceleration(f_d, R, att.DisturbanceState(M)), acc, atol=1e-12)


def test_apparent_mass():
    assert att.apparent_mass(P.b_t, P) == 0.0
    assert att.apparent_mass(P.hover_thrust(), P) == pytest.approx(M, rel=1e-12)
    assert att.apparent_mass(att.hover_thrust(3.1, P), P) == pytest.approx(3.1, rel=1e-12)

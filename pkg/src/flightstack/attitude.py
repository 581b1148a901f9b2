"""SO(3) force tracking: desired force + heading to attitude-rate and thrust.

Also holds the world/body disturbance integrators with the mass estimate
derived from them, and the unbiased desired acceleration reported to the
state estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .simulator import AttitudeRateCommand, VehicleParams, force_to_thrust, thrust_to_force

XY = np.array([1.0, 1.0, 0.0])

COMPLIANT = "heading_compliant"
ORIGINAL = "original"


@dataclass
class AttitudeGains:
    k_R: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 5.0]))
    k_iw: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 12.0]))
    k_ib: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 0.0]))

    def __post_init__(self):
        for name in ("k_R", "k_iw", "k_ib"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if (v < 0.0).any():
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, v)


@dataclass
class DisturbanceState:
    """Force integrators [N] and the resulting mass estimate.

    ``body_sum`` accumulates heading-rotated errors; the world-frame body
    disturbance is ``H(heading) @ body_sum`` with ``heading`` the heading of
    the latest update.
    """

    m: float
    d_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    body_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading: float = 0.0
    g: float = 9.81
    limit: float | None = None
    m_e: float = field(init=False)

    def __post_init__(self):
        if self.m <= 0.0:
            raise ValueError("nominal mass must be positive")
        self.d_w = np.asarray(self.d_w, dtype=float).reshape(3)
        self.body_sum = np.asarray(self.body_sum, dtype=float).reshape(3)
        if self.limit is None:
            self.limit = 0.3 * self.m * self.g
        self.m_e = self._mass()

    @property
    def d_b(self) -> np.ndarray:
        return geo.rot_z(self.heading) @ self.body_sum

    @property
    def total(self) -> np.ndarray:
        return self.d_w + self.d_b

    def _mass(self) -> float:
        # a sagging vehicle (negative z error) integrates a negative force, i.e. more mass
        return max(0.1 * self.m, self.m - float(self.total[2]) / self.g)

    def copy(self) -> "DisturbanceState":
        out = DisturbanceState(self.m, self.d_w.copy(), self.body_sum.copy(), self.heading, self.g, self.limit)
        out.m_e = self.m_e
        return out

    def transformed(self, tf) -> "DisturbanceState":
        """Re-express in a frame rotated by ``tf.rotation`` about the vertical."""
        out = self.copy()
        out.d_w = tf.apply_vector(self.d_w)
        out.heading = geo.wrap_angle(self.heading + tf.rotation)
        return out


def disturbance_update(ds: DisturbanceState, e_p, heading: float, dt: float, gains: AttitudeGains,
                       mask=None, freeze_mass: bool = False) -> DisturbanceState:
    """One integration step of the world and body disturbance estimates.

    ``mask`` zeroes the error on axes whose position is not controlled.  With
    ``freeze_mass`` the z components are held so that m_e stays constant.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    e = np.asarray(e_p, dtype=float).copy()
    if mask is not None:
        e = np.where(mask, e, 0.0)
    if freeze_mass:
        e[2] = 0.0
    lim = ds.limit
    H = geo.rot_z(heading)
    out = ds.copy()
    out.d_w = np.clip(ds.d_w + gains.k_iw * e * dt, -lim, lim)
    out.body_sum = np.clip(ds.body_sum + gains.k_ib * (H.T @ e) * dt, -lim, lim)
    out.heading = heading
    out.m_e = out._mass()
    return out


@dataclass
class ForceCommand:
    f_d: np.ndarray
    heading: float = 0.0
    heading_rate: float = 0.0
    jerk: np.ndarray = field(default_factory=lambda: np.zeros(3))
    terms: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.f_d = np.asarray(self.f_d, dtype=float).reshape(3)
        self.jerk = np.asarray(self.jerk, dtype=float).reshape(3)


def desired_orientation(fc: ForceCommand, construction: str = COMPLIANT) -> np.ndarray:
    if construction == COMPLIANT:
        return geo.desired_orientation_heading_compliant(fc.f_d, fc.heading)
    if construction == ORIGINAL:
        return geo.desired_orientation_original(fc.f_d, fc.heading)
    raise ValueError(f"unknown construction {construction!r}")


def jerk_feedforward(f_d, R_d: np.ndarray, jerk, m_e: float) -> np.ndarray:
    """Body rates that rotate the thrust axis along the desired jerk.

    The thrust direction b3 = f/|f| with f = m_e * acc changes as
    db3/dt = (I - b3 b3') m_e jerk / |f|, which in the desired body frame is
    produced by the rates e3 x (R_d' db3/dt).
    """
    f_norm = float(np.linalg.norm(f_d))
    v = (m_e / f_norm) * (R_d.T @ np.asarray(jerk, dtype=float))
    return np.array([-v[1], v[0], 0.0])


def attitude_command(fc: ForceCommand, R: np.ndarray, m_e: float, gains: AttitudeGains,
                     params: VehicleParams, construction: str = COMPLIANT,
                     parasitic: bool = True, R_d: np.ndarray | None = None) -> AttitudeRateCommand:
    """Attitude-rate command and collective thrust for a desired force.

    omega_d = -k_R * e_R + omega_j - omega_c, where omega_c carries the
    parasitic heading-rate compensation and the heading-rate feedforward
    converted to a yaw rate.  Thrust is the desired force projected on the
    current thrust axis, mapped through the thrust curve.
    """
    if float(np.linalg.norm(fc.f_d)) <= 1e-6:
        raise geo.DegenerateForce("desired force is (close to) zero")
    if R_d is None:
        R_d = desired_orientation(fc, construction)
    e_R = geo.rotation_error(R_d, R)
    w = -gains.k_R * e_R + jerk_feedforward(fc.f_d, R_d, fc.jerk, m_e)
    yaw = 0.0
    try:
        if fc.heading_rate != 0.0:
            yaw += geo.heading_rate_to_yaw_rate(R, fc.heading_rate)
        if parasitic:
            yaw -= geo.parasitic_heading_rate(R, w)
    except geo.DegenerateProjection:
        pass
    w[2] += yaw
    thrust, _ = force_to_thrust(float(fc.f_d @ R[:, 2]), params)
    return AttitudeRateCommand(w, thrust)


def unbiased_acceleration(f_d, R: np.ndarray, ds: DisturbanceState, thrust_force: float | None = None) -> np.ndarray:
    """Acceleration implied by the command with gravity and disturbance offsets removed.

    ``thrust_force`` overrides the projected force (e.g. after thrust saturation).
    """
    b3 = R[:, 2]
    f = float(np.asarray(f_d, dtype=float) @ b3) if thrust_force is None else thrust_force
    m_e = ds.m_e
    return (f * b3 - m_e * ds.g * geo.E3 + ds.d_w * XY + ds.d_b * XY) / m_e


def apparent_mass(thrust: float, params: VehicleParams, g: float | None = None) -> float:
    """Mass that the commanded thrust would hold in hover."""
    g = params.g if g is None else g
    return thrust_to_force(thrust, params) / g


def hover_thrust(m_e: float, params: VehicleParams) -> float:
    return params.a_t * math.sqrt(m_e * params.g) + params.b_t

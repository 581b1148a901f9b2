"""Position feedback controllers.

Both feedback controllers turn the control reference and the state estimate
into a desired force.  The SE(3) controller is a PD law with acceleration
feedforward; the MPC controller regulates each axis with a constrained QP
whose first input is used as an acceleration correction.  The failsafe
controller needs no estimate at all: it levels the vehicle and lowers the
thrust at a fixed rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .attitude import XY, DisturbanceState, ForceCommand, hover_thrust
from .config import ConstraintGroup
from .qp import MpcProblem, MpcSolution, qp_solve
from .simulator import AttitudeRateCommand, VehicleParams
from .tracking import ControlReference

MPC_Q = np.array([500.0, 100.0, 100.0, 500.0, 100.0, 100.0, 100.0, 10.0, 10.0])
MPC_S = np.array([1000.0, 300.0, 300.0, 1000.0, 300.0, 300.0, 100.0, 10.0, 10.0])


@dataclass
class PositionGains:
    k_p: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 10.0]))
    k_v: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 6.0]))

    def __post_init__(self):
        self.k_p = np.broadcast_to(np.asarray(self.k_p, dtype=float), (3,)).copy()
        self.k_v = np.broadcast_to(np.asarray(self.k_v, dtype=float), (3,)).copy()
        if (self.k_p < 0.0).any() or (self.k_v < 0.0).any():
            raise ValueError("gains must be non-negative")


@dataclass
class Estimate:
    """What the controllers see of the state estimate."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.acceleration = np.asarray(self.acceleration, dtype=float).reshape(3)


@dataclass
class ControlError:
    e_p: np.ndarray
    e_v: np.ndarray


def control_error(chi: ControlReference, est: Estimate) -> ControlError:
    """Position error on the specified axes and full velocity error."""
    e_p = np.where(chi.mask, est.position - chi.position, 0.0)
    return ControlError(e_p, est.velocity - chi.velocity)


def limit_tilt(f_d: np.ndarray, max_tilt: float | None) -> np.ndarray:
    """Shrink the horizontal part of ``f_d`` so that it is at most ``max_tilt`` from vertical."""
    if max_tilt is None:
        return f_d
    fz = max(f_d[2], 1e-6)
    h = math.hypot(f_d[0], f_d[1])
    h_max = fz * math.tan(max_tilt)
    if h <= h_max:
        return f_d
    out = f_d.copy()
    out[:2] *= h_max / h
    out[2] = fz
    return out


def se3_desired_force(chi: ControlReference, est: Estimate, ds: DisturbanceState, gains: PositionGains,
                      max_tilt: float | None = None) -> ForceCommand:
    """PD feedback with feedforward, gravity and disturbance compensation."""
    err = control_error(chi, est)
    m_e = ds.m_e
    terms = {
        "position": -m_e * gains.k_p * err.e_p,
        "velocity": -m_e * gains.k_v * err.e_v,
        "feedforward": m_e * chi.acceleration,
        "gravity": m_e * ds.g * geo.E3,
        "disturbance": -(ds.d_w * XY + ds.d_b * XY),
    }
    f_d = sum(terms.values())
    return ForceCommand(limit_tilt(f_d, max_tilt), chi.heading, chi.heading_rate, chi.jerk, terms)


@dataclass
class AxisConstraints:
    v_min: float
    v_max: float
    a_max: float
    jerk: float


def controller_axis_constraints(cg: ConstraintGroup) -> list[AxisConstraints]:
    h = cg.axis_limits("h")
    up = cg.axis_limits("v", True)
    dn = cg.axis_limits("v", False)
    hz = AxisConstraints(-h[0], h[0], h[1], h[2])
    vz = AxisConstraints(-dn[0], up[0], min(up[1], dn[1]), min(up[2], dn[2]))
    return [hz, hz, vz]


def mpc_model(dt: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis prediction model with the input applied directly to the acceleration."""
    A = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 0.0]])
    B = np.array([0.0, 0.0, 1.0])
    return A, B


def mpc_axis_problem(k: int, x0, r_d: float, lim: AxisConstraints, horizon: int = 40, dt: float = 0.05,
                     Q=MPC_Q, S=MPC_S) -> MpcProblem:
    A, B = mpc_model(dt)
    ref = np.array([r_d, 0.0, 0.0])
    return MpcProblem(
        A, B, horizon, Q[3 * k:3 * k + 3], S[3 * k:3 * k + 3], x0, ref,
        x_min=np.array([-math.inf, lim.v_min, -lim.a_max]), x_max=np.array([math.inf, lim.v_max, lim.a_max]),
        du_max=lim.jerk * dt,
    )


def initial_mpc_state(k: int, chi: ControlReference, est: Estimate, lim: AxisConstraints, dt: float,
                      tol: float = 0.05) -> np.ndarray:
    """Initial MPC state: deviation of the estimate from the reference on axis ``k``.

    When the estimated speed or acceleration breaks a bound, the reference
    derivatives replace them (zero derivative deviation).  Violations within
    ``tol`` (relative) are clipped instead: a vehicle riding its speed limit
    would otherwise flip on round-off and lose the braking plan.
    """
    p, v, a = est.position[k], est.velocity[k], est.acceleration[k]
    v_lo, v_hi = lim.v_min * (1.0 + tol), lim.v_max * (1.0 + tol)
    a_hi = lim.a_max * (1.0 + tol)
    if not (v_lo <= v <= v_hi and abs(a) <= a_hi and v_lo <= v + dt * a <= v_hi):
        v, a = chi.velocity[k], chi.acceleration[k]
    dp = p - chi.position[k] if chi.mask[k] else 0.0
    dv = min(max(v - chi.velocity[k], lim.v_min), lim.v_max)
    da = min(max(a - chi.acceleration[k], -lim.a_max), lim.a_max)
    # the first predicted speed depends on x0 alone, so it must already be feasible
    da = min(max(da, (lim.v_min - dv) / dt), (lim.v_max - dv) / dt)
    return np.array([dp, dv, da])


class Se3Controller:
    name = "se3"

    def __init__(self, gains: PositionGains | None = None, max_tilt: float | None = math.radians(45.0)):
        self.gains = gains or PositionGains()
        self.max_tilt = max_tilt
        self.offset = np.zeros(3)
        self.offset_tau = 0.3
        self.saturated = False

    def activate(self, last: ForceCommand | None, chi, est, ds) -> None:
        self.offset = np.zeros(3)
        if last is not None:
            self.offset = last.f_d - se3_desired_force(chi, est, ds, self.gains, self.max_tilt).f_d

    def update(self, chi: ControlReference, est: Estimate, ds: DisturbanceState, dt: float = 0.01) -> ForceCommand:
        fc = se3_desired_force(chi, est, ds, self.gains, self.max_tilt)
        return _apply_offset(self, fc, dt)


def _apply_offset(ctrl, fc: ForceCommand, dt: float) -> ForceCommand:
    # handover transient: the output starts where the previous controller left off
    if ctrl.offset.any():
        fc.f_d = fc.f_d + ctrl.offset
        fc.terms["handover"] = ctrl.offset.copy()
        ctrl.offset = ctrl.offset * math.exp(-dt / ctrl.offset_tau)
        if np.abs(ctrl.offset).max() < 1e-6:
            ctrl.offset = np.zeros(3)
    return fc


class MpcController:
    """Per-axis linear MPC on the acceleration with speed, acceleration and jerk limits.

    Each axis is regulated in deviation coordinates around the reference
    (position, velocity and acceleration minus those of ``chi``), so the first
    input is an acceleration correction added to the reference feedforward.
    The bounds apply to the deviation; with a stationary reference they are
    the absolute speed and acceleration limits.
    """

    name = "mpc"

    def __init__(self, constraints: ConstraintGroup | None = None, horizon: int = 40, dt: float = 0.05,
                 Q=MPC_Q, S=MPC_S):
        self.constraints = constraints or ConstraintGroup()
        self.limits = controller_axis_constraints(self.constraints)
        self.horizon = horizon
        self.dt = dt
        self.Q = np.asarray(Q, dtype=float)
        self.S = np.asarray(S, dtype=float)
        self.solutions: list[MpcSolution | None] = [None, None, None]
        self.fallbacks = 0
        self.offset = np.zeros(3)
        self.offset_tau = 0.3
        self.last_c_d = np.zeros(3)
        self.saturated = False

    def set_constraints(self, cg: ConstraintGroup) -> None:
        self.constraints = cg
        self.limits = controller_axis_constraints(cg)
        self.solutions = [None, None, None]

    def activate(self, last: ForceCommand | None, chi, est, ds) -> None:
        self.solutions = [None, None, None]
        self.offset = np.zeros(3)
        if last is not None:
            self.offset = last.f_d - self.desired_force(chi, est, ds).f_d

    def reset_warm_start(self) -> None:
        self.solutions = [None, None, None]

    def acceleration_correction(self, chi: ControlReference, est: Estimate) -> np.ndarray:
        c_d = np.zeros(3)
        saturated = False
        for k in range(3):
            lim = self.limits[k]
            x0 = initial_mpc_state(k, chi, est, lim, self.dt)
            prob = mpc_axis_problem(k, x0, 0.0, lim, self.horizon, self.dt, self.Q, self.S)
            prev = self.solutions[k]
            sol = qp_solve(prob, prev)
            if sol.polished or sol.status == "solved":
                self.solutions[k] = sol
                c_d[k] = sol.u[0]
                # plan riding a speed or acceleration limit: the loop is not in its linear regime
                near = 0.95
                v_plan = sol.states[:, 1]
                saturated |= bool(abs(sol.u[0]) >= near * lim.a_max or (v_plan >= near * lim.v_max).any()
                                  or (v_plan <= near * lim.v_min).any())
            else:
                self.fallbacks += 1
                c_d[k] = prev.u[1] if prev is not None else 0.0
        self.last_c_d = c_d
        self.saturated = saturated
        return c_d

    def desired_force(self, chi: ControlReference, est: Estimate, ds: DisturbanceState) -> ForceCommand:
        c_d = self.acceleration_correction(chi, est)
        m_e = ds.m_e
        terms = {
            "feedforward": m_e * chi.acceleration,
            "mpc": m_e * c_d,
            "gravity": m_e * ds.g * geo.E3,
            "disturbance": -(ds.d_w * XY + ds.d_b * XY),
        }
        return ForceCommand(sum(terms.values()), chi.heading, chi.heading_rate, chi.jerk, terms)

    def update(self, chi: ControlReference, est: Estimate, ds: DisturbanceState, dt: float = 0.01) -> ForceCommand:
        return _apply_offset(self, self.desired_force(chi, est, ds), dt)


def mpc_desired_force(chi: ControlReference, est: Estimate, ds: DisturbanceState,
                      controller: MpcController | None = None) -> ForceCommand:
    """Single MPC evaluation; pass a persistent ``controller`` to keep warm starts."""
    ctrl = controller or MpcController()
    return ctrl.desired_force(chi, est, ds)


@dataclass
class FailsafeConfig:
    k_fs: float = 0.01
    t_min: float = 0.2
    k_R: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 5.0]))


def failsafe_thrust(m_e: float, t: float, params: VehicleParams, cfg: FailsafeConfig | None = None) -> float:
    cfg = cfg or FailsafeConfig()
    return max(cfg.t_min, hover_thrust(m_e, params) - cfg.k_fs * t)


def failsafe_command(ds: DisturbanceState, t: float, params: VehicleParams, R: np.ndarray | None = None,
                     cfg: FailsafeConfig | None = None) -> AttitudeRateCommand:
    """Level-attitude, decaying-thrust command ``t`` seconds after activation.

    The level target keeps the current heading; only the embedded attitude
    ``R`` is used, so no position or velocity estimate is needed.
    """
    cfg = cfg or FailsafeConfig()
    thrust = failsafe_thrust(ds.m_e, t, params, cfg)
    if R is None:
        return AttitudeRateCommand(np.zeros(3), thrust)
    try:
        R_level = geo.rot_z(geo.heading_of(R))
    except geo.HeadingUndefined:
        R_level = np.eye(3)
    e_R = geo.rotation_error(R_level, R)
    w = -cfg.k_R * e_R
    w[2] = 0.0
    return AttitudeRateCommand(w, thrust)


class FailsafeController:
    name = "failsafe"

    def __init__(self, params: VehicleParams, cfg: FailsafeConfig | None = None):
        self.params = params
        self.cfg = cfg or FailsafeConfig()
        self.t0 = None
        self.ds = None

    def activate(self, t: float, ds: DisturbanceState) -> None:
        self.t0 = t
        self.ds = ds.copy()

    def command(self, t: float, R: np.ndarray) -> AttitudeRateCommand:
        return failsafe_command(self.ds, t - self.t0, self.params, R, self.cfg)


def controller_handover(last: ForceCommand | None, new, chi: ControlReference, est: Estimate,
                        ds: DisturbanceState):
    """Initialize ``new`` from the previous controller's last output.

    The disturbance state is shared by all controllers, so only warm starts
    and a decaying output offset need seeding; the new controller's first
    output then equals ``last`` and converges to its own law.
    """
    new.activate(last, chi, est, ds)
    return new

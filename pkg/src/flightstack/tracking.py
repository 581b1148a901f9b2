"""Feedforward reference generation.

Three trackers produce the full-state control reference (position through
jerk plus heading and heading rate) at 100 Hz:

* :class:`MpcTracker` drives a constrained virtual triple integrator per axis
  with a receding-horizon plan and samples the reference from it,
* :class:`LandoffTracker` ramps the altitude for take-off and landing while
  keeping the reference within an admittance radius of the estimate,
* :class:`SpeedTracker` low-pass filters commanded horizontal velocities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from . import geometry as geo
from .config import ConstraintGroup
from .qp import MpcProblem, MpcSolution, qp_solve

TICK = 0.01


class EmptyTrajectory(ValueError):
    pass


@dataclass
class ControlReference:
    """Full-state reference; ``mask`` flags the axes whose position is specified."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jerk: np.ndarray = field(default_factory=lambda: np.zeros(3))
    heading: float = 0.0
    heading_rate: float = 0.0
    mask: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=bool))

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration", "jerk"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        self.mask = np.asarray(self.mask, dtype=bool).reshape(3)
        self.heading = geo.wrap_angle(float(self.heading))

    def copy(self) -> "ControlReference":
        return ControlReference(self.position.copy(), self.velocity.copy(), self.acceleration.copy(),
                                self.jerk.copy(), self.heading, self.heading_rate, self.mask.copy())

    def transformed(self, tf) -> "ControlReference":
        """Re-express the reference in another frame (see ``estimation.FrameTransform``)."""
        return ControlReference(tf.apply_point(self.position), tf.apply_vector(self.velocity),
                                tf.apply_vector(self.acceleration), tf.apply_vector(self.jerk),
                                tf.apply_heading(self.heading), self.heading_rate, self.mask.copy())

    def is_finite(self) -> bool:
        vals = np.concatenate((self.position, self.velocity, self.acceleration, self.jerk,
                               [self.heading, self.heading_rate]))
        return bool(np.isfinite(vals).all())


@dataclass
class TrajectorySetpoint:
    """A single pose (one sample) or a uniformly sampled trajectory starting at ``t0``."""

    positions: np.ndarray
    headings: np.ndarray
    period: float = 0.2
    t0: float = 0.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.headings = np.atleast_1d(np.asarray(self.headings, dtype=float))
        if self.positions.size == 0:
            raise EmptyTrajectory("trajectory has no samples")
        if self.positions.shape[1] != 3 or len(self.headings) != len(self.positions):
            raise ValueError("positions must be (k, 3) with one heading per sample")
        if len(self.positions) > 1 and not self.period > 0.0:
            raise ValueError("sampling period must be positive")

    @classmethod
    def point(cls, position, heading: float = 0.0, t0: float = 0.0) -> "TrajectorySetpoint":
        return cls(np.asarray(position, dtype=float).reshape(1, 3), [heading], 1.0, t0)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.period

    def sample(self, t: float) -> tuple[np.ndarray, float]:
        """Position and heading at absolute time ``t`` (clamped to the ends)."""
        if len(self) == 1:
            return self.positions[0].copy(), geo.wrap_angle(self.headings[0])
        s = (t - self.t0) / self.period
        if s <= 0.0:
            return self.positions[0].copy(), geo.wrap_angle(self.headings[0])
        k = int(math.floor(s))
        if k >= len(self) - 1:
            return self.positions[-1].copy(), geo.wrap_angle(self.headings[-1])
        a = s - k
        pos = (1.0 - a) * self.positions[k] + a * self.positions[k + 1]
        h0 = self.headings[k]
        hd = geo.angle_diff(self.headings[k + 1], h0)
        return pos, geo.wrap_angle(h0 + a * hd)

    def sample_many(self, times) -> tuple[np.ndarray, np.ndarray]:
        times = np.asarray(times, dtype=float)
        if len(self) == 1:
            return (np.broadcast_to(self.positions[0], (len(times), 3)).copy(),
                    np.full(len(times), geo.wrap_angle(self.headings[0])))
        s = np.clip((times - self.t0) / self.period, 0.0, len(self) - 1)
        k = np.minimum(np.floor(s).astype(int), len(self) - 2)
        a = (s - k)[:, None]
        pos = (1.0 - a) * self.positions[k] + a * self.positions[k + 1]
        h0 = self.headings[k]
        hd = np.angle(np.exp(1j * (self.headings[k + 1] - h0)))
        hdg = np.angle(np.exp(1j * (h0 + a[:, 0] * hd)))
        return pos, hdg


def resample_trajectory(traj: TrajectorySetpoint, tick: float = TICK, duration: float | None = None):
    """Per-tick ``(times, positions, headings)`` stream; holds the last point past the end."""
    if len(traj) == 0:
        raise EmptyTrajectory("trajectory has no samples")
    if duration is None:
        duration = traj.duration
    n = int(round(duration / tick)) + 1
    times = traj.t0 + tick * np.arange(n)
    pos = np.empty((n, 3))
    hdg = np.empty(n)
    for i, t in enumerate(times):
        pos[i], hdg[i] = traj.sample(t)
    return times, pos, hdg


@dataclass
class AxisState:
    """Position-level triple integrator with the jerk currently applied."""

    p: float = 0.0
    v: float = 0.0
    a: float = 0.0
    j: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.p, self.v, self.a])


@dataclass
class VirtualUavState:
    axes: list = field(default_factory=lambda: [AxisState() for _ in range(3)])
    heading: AxisState = field(default_factory=AxisState)

    @classmethod
    def at_rest(cls, position, heading: float = 0.0) -> "VirtualUavState":
        position = np.asarray(position, dtype=float)
        return cls([AxisState(float(p)) for p in position], AxisState(float(heading)))

    @classmethod
    def from_reference(cls, chi: ControlReference) -> "VirtualUavState":
        axes = [AxisState(chi.position[i], chi.velocity[i], chi.acceleration[i], chi.jerk[i]) for i in range(3)]
        return cls(axes, AxisState(chi.heading, chi.heading_rate))

    def copy(self) -> "VirtualUavState":
        return VirtualUavState([AxisState(a.p, a.v, a.a, a.j) for a in self.axes],
                               AxisState(self.heading.p, self.heading.v, self.heading.a, self.heading.j))

    def reference(self) -> ControlReference:
        ax = self.axes
        return ControlReference(
            np.array([a.p for a in ax]), np.array([a.v for a in ax]), np.array([a.a for a in ax]),
            np.array([a.j for a in ax]), geo.wrap_angle(self.heading.p), self.heading.v,
        )

    def transformed(self, tf) -> "VirtualUavState":
        chi = self.reference().transformed(tf)
        out = VirtualUavState.from_reference(chi)
        # keep the unwrapped heading continuous
        out.heading = AxisState(self.heading.p + tf.rotation, self.heading.v, self.heading.a, self.heading.j)
        return out


def jerk_model(dt: float) -> tuple[np.ndarray, np.ndarray]:
    A = np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    B = np.array([dt ** 3 / 6.0, 0.5 * dt * dt, dt])
    return A, B


def lqr_gain(A, B, Q, r: float) -> np.ndarray:
    """Discrete LQR gain for a single-input system."""
    Bc = np.asarray(B, dtype=float).reshape(-1, 1)
    X = solve_discrete_are(A, Bc, np.diag(Q), np.array([[r]]))
    return np.linalg.solve(r + Bc.T @ X @ Bc, Bc.T @ X @ A)[0]


def _integrate(s: AxisState, j: float, dt: float) -> AxisState:
    return AxisState(
        s.p + s.v * dt + 0.5 * s.a * dt * dt + j * dt ** 3 / 6.0,
        s.v + s.a * dt + 0.5 * j * dt * dt,
        s.a + j * dt,
        j,
    )


def _limits(cg: ConstraintGroup, axis: int | str, v_now: float):
    """(v_min, v_max, acc, jerk, snap) for a tracker axis."""
    if axis == "heading":
        v, a, j, s = cg.axis_limits("heading")
        return -v, v, a, j, s
    if axis < 2:
        v, a, j, s = cg.axis_limits("h")
        return -v, v, a, j, s
    v_up, a_up, j_up, s_up = cg.axis_limits("v", ascending=True)
    v_dn, a_dn, j_dn, s_dn = cg.axis_limits("v", ascending=False)
    if v_now >= 0.0:
        return -v_dn, v_up, a_up, j_up, s_up
    return -v_dn, v_up, a_dn, j_dn, s_dn


def _project(s: AxisState, v_min: float, v_max: float, a_max: float) -> AxisState:
    a = min(a_max, max(-a_max, s.a))
    v = min(v_max, max(v_min, s.v))
    return AxisState(s.p, v, a, s.j)


def _derivatives(samples: np.ndarray, dt: float):
    """Position, velocity and acceleration at the inner samples by central differences."""
    pos = samples[1:-1]
    vel = (samples[2:] - samples[:-2]) / (2.0 * dt)
    acc = (samples[2:] - 2.0 * samples[1:-1] + samples[:-2]) / (dt * dt)
    return pos, vel, acc


class MpcTracker:
    """Receding-horizon reference generator over a virtual UAV.

    Every tick each axis solves a linear MPC problem for the jerk input of a
    triple integrator sampled at ``dt_trk`` with velocity, acceleration,
    jerk and snap (jerk slew) limits, applies the first input for one tick
    and reads the reference from the integrated virtual state.
    """

    Q = np.array([10.0, 2.0, 0.1])
    S = np.array([200.0, 50.0, 5.0])

    def __init__(self, constraints: ConstraintGroup, horizon: int = 40, dt_trk: float = 0.2,
                 dt: float = TICK):
        self.constraints = constraints
        self.horizon = horizon
        self.dt_trk = dt_trk
        self.dt = dt
        self.A, self.B = jerk_model(dt_trk)
        # pre-stabilization only conditions the QP; the optimum is unchanged
        self.K = lqr_gain(self.A, self.B, self.Q, 0.01)
        self.state = VirtualUavState()
        self._warm: list[MpcSolution | None] = [None] * 4
        self.fallbacks = 0
        self.last_slack = 0.0

    def reset(self, position, heading: float = 0.0, velocity=None) -> None:
        self.state = VirtualUavState.at_rest(position, heading)
        if velocity is not None:
            for a, v in zip(self.state.axes, velocity):
                a.v = float(v)
        self._warm = [None] * 4

    def reset_to(self, chi: ControlReference) -> None:
        self.state = VirtualUavState.from_reference(chi)
        self._warm = [None] * 4

    def set_constraints(self, constraints: ConstraintGroup) -> None:
        self.constraints = constraints
        self._warm = [None] * 4

    def transform(self, tf) -> None:
        self.state = self.state.transformed(tf)
        self._warm = [None] * 4

    def _axis_refs(self, setpoint: TrajectorySetpoint, t: float):
        # one sample on each side of the horizon gives central differences everywhere
        times = t + self.dt_trk * np.arange(0, self.horizon + 2)
        pos, hdg = setpoint.sample_many(times)
        return _derivatives(pos, self.dt_trk), hdg

    def _solve_axis(self, k: int, s: AxisState, ref, limits) -> float:
        v_min, v_max, a_max, j_max, snap = limits
        prob = MpcProblem(
            self.A, self.B, self.horizon, self.Q, self.S, s.vector(), ref,
            x_min=np.array([-math.inf, v_min, -a_max]), x_max=np.array([math.inf, v_max, a_max]),
            u_min=-j_max, u_max=j_max, du_max=snap * self.dt_trk, u_prev=s.j,
            soft=(1, 2), soft_weight=1e5, K=self.K,
        )
        sol = qp_solve(prob, self._warm[k])
        if not np.isfinite(sol.u).all():
            self._warm[k] = None
            self.fallbacks += 1
            return -math.copysign(j_max, s.a) if s.a else 0.0
        self._warm[k] = sol
        self.last_slack = max(self.last_slack, sol.slack)
        return float(sol.u[0])

    def _apply(self, s: AxisState, j_cmd: float, limits) -> AxisState:
        v_min, v_max, a_max, j_max, snap = limits
        dt = self.dt
        j = min(j_max, max(-j_max, j_cmd))
        j = min(s.j + snap * dt, max(s.j - snap * dt, j))
        j = min(j_max, max(-j_max, j))
        # keep the acceleration inside its box over the tick
        j = min((a_max - s.a) / dt, max((-a_max - s.a) / dt, j)) if abs(s.a + j * dt) > a_max else j
        return _project(_integrate(s, j, dt), v_min, v_max, a_max)

    def step(self, setpoint: TrajectorySetpoint, t: float) -> ControlReference:
        """Advance the virtual UAV one tick toward ``setpoint``; returns the new reference."""
        self.last_slack = 0.0
        (ref_p, ref_v, ref_a), ref_h = self._axis_refs(setpoint, t)
        new_axes = []
        for k, s in enumerate(self.state.axes):
            lim = _limits(self.constraints, k, s.v)
            ref = np.column_stack((ref_p[:, k], ref_v[:, k], ref_a[:, k]))
            j = self._solve_axis(k, s, ref, lim)
            new_axes.append(self._apply(s, j, lim))
        hs = self.state.heading
        # unwrap the heading reference around the virtual heading, shortest arc first
        unwrapped = np.empty(len(ref_h))
        prev = hs.p
        for i, h in enumerate(ref_h):
            prev = prev + geo.angle_diff(h, prev)
            unwrapped[i] = prev
        lim = _limits(self.constraints, "heading", hs.v)
        j = self._solve_axis(3, hs, np.column_stack(_derivatives(unwrapped, self.dt_trk)), lim)
        new_heading = self._apply(hs, j, lim)
        # keep the internal heading bounded without breaking continuity
        if abs(new_heading.p) > 100.0:
            new_heading.p = geo.wrap_angle(new_heading.p)
            self._warm[3] = None
        self.state = VirtualUavState(new_axes, new_heading)
        return self.state.reference()


def check_reference_constraints(chi: ControlReference, cg: ConstraintGroup, tol: float = 1e-6) -> list[str]:
    """Names of the derivatives of ``chi`` that exceed their bounds."""
    bad = []
    h = cg.axis_limits("h")
    if np.abs(chi.velocity[:2]).max() > h[0] + tol:
        bad.append("horizontal_speed")
    if np.abs(chi.acceleration[:2]).max() > h[1] + tol:
        bad.append("horizontal_acceleration")
    if np.abs(chi.jerk[:2]).max() > h[2] + tol:
        bad.append("horizontal_jerk")
    up = cg.axis_limits("v", True)
    dn = cg.axis_limits("v", False)
    if chi.velocity[2] > up[0] + tol or chi.velocity[2] < -dn[0] - tol:
        bad.append("vertical_speed")
    if abs(chi.acceleration[2]) > max(up[1], dn[1]) + tol:
        bad.append("vertical_acceleration")
    if abs(chi.jerk[2]) > max(up[2], dn[2]) + tol:
        bad.append("vertical_jerk")
    if abs(chi.heading_rate) > cg.heading_speed + tol:
        bad.append("heading_speed")
    return bad


class LandoffTracker:
    """Altitude ramps for take-off and landing with admittance saturation.

    During take-off the altitude ramp climbs at ``climb_speed`` but neither
    the ramp nor the emitted reference may move further than
    ``admittance_radius`` from the estimated position, so a vehicle held on
    the ground never sees a large position error.  Landing keeps the
    reference at most ``landing_offset`` below the estimate and descends at
    ``land_speed``.
    """

    def __init__(self, admittance_radius: float = 0.5, climb_speed: float = 1.0,
                 climb_acceleration: float = 1.0, land_speed: float = 0.2,
                 landing_offset: float = 0.5, dt: float = TICK):
        if admittance_radius <= 0.0:
            raise ValueError("admittance radius must be positive")
        self.radius = admittance_radius
        self.climb_speed = climb_speed
        self.climb_acc = climb_acceleration
        self.land_speed = land_speed
        self.landing_offset = landing_offset
        self.dt = dt
        self.mode = "idle"
        self.xy = np.zeros(2)
        self.heading = 0.0
        self.z = 0.0
        self.vz = 0.0
        self.target = 0.0
        self.saturated = False

    def start_takeoff(self, position, heading: float, target_height: float) -> None:
        self.mode = "takeoff"
        self.xy = np.asarray(position, dtype=float)[:2].copy()
        self.z = float(position[2])
        self.vz = 0.0
        self.heading = heading
        self.target = target_height

    def start_landing(self, position, heading: float) -> None:
        self.mode = "landing"
        self.xy = np.asarray(position, dtype=float)[:2].copy()
        self.z = float(position[2])
        self.vz = 0.0
        self.heading = heading

    @property
    def takeoff_complete(self) -> bool:
        return self.mode == "takeoff" and self.z >= self.target - 1e-9 and self.vz == 0.0

    def _ramp(self, goal_speed: float) -> None:
        dv = self.climb_acc * self.dt
        self.vz = min(self.vz + dv, max(self.vz - dv, goal_speed))

    def step(self, est_position) -> ControlReference:
        est = np.asarray(est_position, dtype=float)
        dt = self.dt
        acc = 0.0
        if self.mode == "takeoff":
            remaining = self.target - self.z
            # brake so that the ramp stops on the target
            v_stop = math.sqrt(max(0.0, 2.0 * self.climb_acc * remaining))
            v0 = self.vz
            self._ramp(min(self.climb_speed, v_stop))
            acc = (self.vz - v0) / dt
            self.z = min(self.target, self.z + self.vz * dt)
            if self.z >= self.target:
                self.vz = 0.0
                acc = 0.0
            limit = est[2] + self.radius
            self.saturated = self.z > limit
            if self.saturated:
                self.z = limit
                self.vz = 0.0
                acc = 0.0
        elif self.mode == "landing":
            v0 = self.vz
            self._ramp(-self.land_speed)
            acc = (self.vz - v0) / dt
            self.z = max(self.z + self.vz * dt, est[2] - self.landing_offset)
        pos = np.array([self.xy[0], self.xy[1], self.z])
        # admittance: the emitted reference stays within the radius of the estimate
        d = pos - est
        n = np.linalg.norm(d)
        if self.mode == "takeoff" and n > self.radius:
            pos = est + d * (self.radius / n)
        return ControlReference(pos, np.array([0.0, 0.0, self.vz]), np.array([0.0, 0.0, acc]),
                                np.zeros(3), self.heading, 0.0)


@dataclass
class SpeedCommand:
    """Partial reference: horizontal velocity (and optionally acceleration), height, heading."""

    velocity: np.ndarray
    height: float
    heading: float
    acceleration: np.ndarray | None = None

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(2)
        if self.acceleration is not None:
            self.acceleration = np.asarray(self.acceleration, dtype=float).reshape(2)


class SpeedTracker:
    """Passes height and heading through; low-pass filters the horizontal velocity.

    ``max_acceleration`` optionally caps the norm of the per-tick velocity
    change so the reference respects the horizontal acceleration limit.
    """

    def __init__(self, cutoff_hz: float = 1.0, dt: float = TICK, max_acceleration: float | None = None):
        if cutoff_hz <= 0.0:
            raise ValueError("cutoff must be positive")
        self.tau = 1.0 / (2.0 * math.pi * cutoff_hz)
        self.dt = dt
        self.max_acceleration = max_acceleration
        self.chi = ControlReference(mask=np.array([False, False, True]))

    def reset(self, chi: ControlReference) -> None:
        self.chi = chi.copy()
        self.chi.mask = np.array([False, False, True])

    def step(self, cmd: SpeedCommand) -> ControlReference:
        c = self.chi
        # exact discretization of the first-order lag
        k = 1.0 - math.exp(-self.dt / self.tau)
        v_prev = c.velocity[:2].copy()
        dv = k * (cmd.velocity - v_prev)
        if self.max_acceleration is not None:
            n = float(np.linalg.norm(dv))
            cap = self.max_acceleration * self.dt
            if n > cap:
                dv *= cap / n
        v = v_prev + dv
        acc = (v - v_prev) / self.dt if cmd.acceleration is None else cmd.acceleration
        pos = c.position.copy()
        pos[:2] += 0.5 * (v + v_prev) * self.dt
        pos[2] = cmd.height
        self.chi = ControlReference(
            pos, np.array([v[0], v[1], 0.0]), np.array([acc[0], acc[1], 0.0]), np.zeros(3),
            cmd.heading, 0.0, np.array([False, False, True]),
        )
        return self.chi

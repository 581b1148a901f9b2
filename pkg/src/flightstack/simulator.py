"""Ground-truth multirotor simulation.

Translation follows m r'' = f R e3 - m g e3 plus wind and body drag; the
embedded attitude-rate controller is emulated by a first-order lag on the body
rates.  Collective thrust commands in [0, 1] are mapped to force through the
quadratic thrust curve T = a_t sqrt(f) + b_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .config import read_key_values

E3 = geo.E3


class NonFiniteState(RuntimeError):
    pass


@dataclass
class VehicleParams:
    m: float = 3.5
    g: float = 9.81
    # hover at T = 0.55 for the nominal 3.5 kg vehicle
    a_t: float = 0.45 / math.sqrt(3.5 * 9.81)
    b_t: float = 0.10
    tau_omega: float = 0.02
    omega_max: float = 10.0
    drag_b: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.drag_b = np.asarray(self.drag_b, dtype=float).reshape(3)
        if self.m <= 0.0:
            raise ValueError("mass must be positive")
        if self.a_t <= 0.0:
            raise ValueError("a_t must be positive")
        if not 0.0 <= self.b_t < 1.0:
            raise ValueError("b_t must lie in [0, 1)")
        if self.tau_omega <= 0.0:
            raise ValueError("tau_omega must be positive")

    @classmethod
    def from_file(cls, path: str | Path) -> "VehicleParams":
        """Read a ``key: value`` file whose keys are the field names."""
        values = read_key_values(path)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        return cls(**values)

    @property
    def max_force(self) -> float:
        return thrust_to_force(1.0, self)

    def hover_thrust(self, mass: float | None = None) -> float:
        m = self.m if mass is None else mass
        return self.a_t * math.sqrt(m * self.g) + self.b_t


@dataclass
class RigidBodyState:
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.r.copy(), self.v.copy(), self.R.copy(), self.omega.copy())


@dataclass
class AttitudeRateCommand:
    omega_d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    thrust: float = 0.0

    def __post_init__(self):
        self.omega_d = np.asarray(self.omega_d, dtype=float).reshape(3)
        self.thrust = min(1.0, max(0.0, float(self.thrust)))


def thrust_to_force(thrust: float, params: VehicleParams) -> float:
    """Collective force [N] produced by the normalized thrust command."""
    t = min(1.0, max(thrust, params.b_t))
    return ((t - params.b_t) / params.a_t) ** 2


def force_to_thrust(force: float, params: VehicleParams) -> tuple[float, bool]:
    """Invert the thrust curve; returns ``(thrust, saturated)``."""
    t = params.a_t * math.sqrt(max(force, 0.0)) + params.b_t
    if t > 1.0:
        return 1.0, True
    if t < 0.0:
        return 0.0, True
    return t, False


def _deriv(v, R, omega, force, omega_cmd, wind, mass, params):
    b3 = R[:, 2]
    acc = (force / mass) * b3 - params.g * E3
    if wind is not None:
        acc = acc + wind / mass
    if params.drag_b.any():
        acc = acc - (R @ (params.drag_b * (R.T @ v))) / mass
    omega_dot = (omega_cmd - omega) / params.tau_omega
    return acc, omega_dot


def step(
    state: RigidBodyState,
    cmd: AttitudeRateCommand,
    wind_w,
    dt: float,
    params: VehicleParams,
    mass: float | None = None,
    floor: bool = False,
) -> RigidBodyState:
    """Advance the rigid body by one RK4 step.

    The rotation is propagated on SO(3) with the exponential map using the
    stage-averaged body rate, then projected back onto SO(3).  ``mass``
    overrides the nominal mass (payload changes); ``floor`` enables a z >= 0
    ground plane.
    """
    if not 0.0 < dt <= 0.01:
        raise ValueError("dt must lie in (0, 0.01]")
    m = params.m if mass is None else mass
    wind = None if wind_w is None else np.asarray(wind_w, dtype=float)
    force = thrust_to_force(cmd.thrust, params)
    w_cmd = np.clip(cmd.omega_d, -params.omega_max, params.omega_max)

    r0, v0, R0, w0 = state.r, state.v, state.R, state.omega
    a1, wd1 = _deriv(v0, R0, w0, force, w_cmd, wind, m, params)

    h = 0.5 * dt
    v2 = v0 + h * a1
    w2 = w0 + h * wd1
    R2 = R0 @ geo.expm_so3(h * w0)
    a2, wd2 = _deriv(v2, R2, w2, force, w_cmd, wind, m, params)

    v3 = v0 + h * a2
    w3 = w0 + h * wd2
    R3 = R0 @ geo.expm_so3(h * w2)
    a3, wd3 = _deriv(v3, R3, w3, force, w_cmd, wind, m, params)

    v4 = v0 + dt * a3
    w4 = w0 + dt * wd3
    R4 = R0 @ geo.expm_so3(dt * w3)
    a4, wd4 = _deriv(v4, R4, w4, force, w_cmd, wind, m, params)

    r = r0 + (dt / 6.0) * (v0 + 2.0 * v2 + 2.0 * v3 + v4)
    v = v0 + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    w = w0 + (dt / 6.0) * (wd1 + 2.0 * wd2 + 2.0 * wd3 + wd4)
    R = R0 @ geo.expm_so3((dt / 6.0) * (w0 + 2.0 * w2 + 2.0 * w3 + w4))
    R = _reorthonormalize(R)

    if floor and r[2] <= 0.0:
        r[2] = 0.0
        if v[2] <= 0.0:
            # resting contact: no sliding, no sinking
            v = np.zeros(3)

    if not (np.isfinite(r).all() and np.isfinite(v).all() and np.isfinite(R).all() and np.isfinite(w).all()):
        raise NonFiniteState("simulation produced a non-finite state")
    return RigidBodyState(r, v, R, w)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    # one Newton step of the polar decomposition; exact SVD only when drift is large
    err = R.T @ R - np.eye(3)
    if np.abs(err).max() > 1e-6:
        return geo.orthonormalize(R)
    return R - 0.5 * R @ err


@dataclass
class MeasurementConfig:
    """Synthetic position/velocity source.

    ``jumps`` is a list of ``(time, offset)``; every offset whose time has
    passed is added to the measured position.  ``frame_offset`` and
    ``frame_heading`` express the source's own frame of reference.
    """

    sigma_pos: float = 0.0
    sigma_vel: float = 0.0
    rate: float = 100.0
    jumps: list = field(default_factory=list)
    seed: int = 0
    frame_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_heading: float = 0.0

    def __post_init__(self):
        if self.sigma_pos < 0.0 or self.sigma_vel < 0.0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.rate <= 0.0:
            raise ValueError("rate must be positive")
        self.frame_offset = np.asarray(self.frame_offset, dtype=float).reshape(3)
        self.jumps = [(float(t), np.asarray(o, dtype=float).reshape(3)) for t, o in self.jumps]


@dataclass
class Measurement:
    t: float
    position: np.ndarray
    velocity: np.ndarray


class MeasurementSource:
    """Stateful sampler for one :class:`MeasurementConfig` with its own RNG."""

    def __init__(self, cfg: MeasurementConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.enabled = True

    def measure(self, state: RigidBodyState, t: float) -> Measurement:
        cfg = self.cfg
        Rf = geo.rot_z(cfg.frame_heading)
        pos = Rf @ state.r + cfg.frame_offset
        vel = Rf @ state.v
        for t_jump, offset in cfg.jumps:
            if t >= t_jump:
                pos = pos + offset
        # always draw both so the noise stream does not depend on sigma being zero
        n_pos = self.rng.standard_normal(3)
        n_vel = self.rng.standard_normal(3)
        return Measurement(t, pos + cfg.sigma_pos * n_pos, vel + cfg.sigma_vel * n_vel)


def measure(state: RigidBodyState, cfg: MeasurementConfig, t: float, rng=None) -> Measurement:
    """One-shot measurement; pass an ``rng`` to continue a noise stream."""
    src = MeasurementSource(cfg)
    if rng is not None:
        src.rng = rng
    return src.measure(state, t)


class Simulator:
    """1 kHz truth integrator holding wind, payload and contact state."""

    def __init__(self, params: VehicleParams, state: RigidBodyState | None = None,
                 dt: float = 0.001, floor: bool = False):
        self.params = params
        self.state = state.copy() if state is not None else RigidBodyState()
        self.dt = dt
        self.floor = floor
        self.t = 0.0
        self.wind = np.zeros(3)
        self.extra_mass = 0.0
        self.pinned = False
        self.cmd = AttitudeRateCommand()
        self.contacts: list[tuple[float, np.ndarray, float]] = []
        self._in_contact = floor and self.state.r[2] <= 0.0
        self.steps = 0

    @property
    def mass(self) -> float:
        return self.params.m + self.extra_mass

    def advance(self, n_steps: int = 1) -> RigidBodyState:
        for _ in range(n_steps):
            prev_v = self.state.v.copy()
            new = step(self.state, self.cmd, self.wind, self.dt, self.params,
                       mass=self.mass, floor=self.floor)
            if self.pinned:
                new.r = self.state.r.copy()
                new.v = np.zeros(3)
            self.state = new
            self.t = round(self.t + self.dt, 9)
            self.steps += 1
            if self.floor:
                touching = new.r[2] <= 0.0
                if touching and not self._in_contact:
                    self.contacts.append((self.t, prev_v, geo.tilt_angle(new.R)))
                self._in_contact = touching
        return self.state

    @property
    def on_ground(self) -> bool:
        return self.floor and self._in_contact


def with_params(params: VehicleParams, **changes) -> VehicleParams:
    return replace(params, **changes)

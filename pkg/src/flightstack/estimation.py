"""Bank of decoupled linear Kalman filters with an arbiter.

Each hypothesis carries x = [x, vx, ax, y, vy, ay, z, vz, az, heading,
heading_rate] in its own frame of reference.  The three translational axes and
the heading form four independent subsystems; the acceleration states follow
the commanded (unbiased) acceleration through a first-order lag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry as geo
from .config import ConfigError, read_key_values

NX = 11
POS = (0, 3, 6)
VEL = (1, 4, 7)
ACC = (2, 5, 8)
HDG = 9
HDG_RATE = 10


class DimensionMismatch(ValueError):
    pass


class TimestampMismatch(ValueError):
    pass


class NoReliableFilter(RuntimeError):
    pass


@dataclass(frozen=True)
class LtiModel:
    A: np.ndarray
    B: np.ndarray
    dt: float
    p: tuple[float, float, float]


def translation_block(dt: float, a: float) -> np.ndarray:
    return np.array([[1.0, dt, 0.5 * dt * dt], [0.0, 1.0, dt], [0.0, 0.0, a]])


def build_model(dt: float, p1: float, p2: float, p3: float) -> LtiModel:
    """Block-diagonal model; ``p1`` horizontal, ``p2`` vertical, ``p3`` heading.

    ``B`` has one input column per subsystem: [ax, ay, az, heading input].
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    for p in (p1, p2, p3):
        if not 0.0 <= p <= 1.0:
            raise ValueError("transfer parameters must lie in [0, 1]")
    A = np.zeros((NX, NX))
    B = np.zeros((NX, 4))
    for k, p in enumerate((p1, p1, p2)):
        i = 3 * k
        A[i:i + 3, i:i + 3] = translation_block(dt, p)
        B[i + 2, k] = 1.0 - p
    A[9:11, 9:11] = [[1.0, dt], [0.0, p3]]
    B[10, 3] = 1.0 - p3
    return LtiModel(A, B, dt, (p1, p2, p3))


@dataclass
class EstimatorHypothesis:
    x: np.ndarray
    P: np.ndarray
    frame: str = "world"
    measurement_set: str = ""
    reliable: bool = True
    t: float = 0.0

    def copy(self) -> "EstimatorHypothesis":
        return replace(self, x=self.x.copy(), P=self.P.copy())

    @property
    def position(self) -> np.ndarray:
        return self.x[list(POS)]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[list(VEL)]

    @property
    def acceleration(self) -> np.ndarray:
        return self.x[list(ACC)]

    @property
    def heading(self) -> float:
        return float(self.x[HDG])

    @property
    def heading_rate(self) -> float:
        return float(self.x[HDG_RATE])


def initial_hypothesis(position=(0.0, 0.0, 0.0), heading=0.0, var=1.0, **kw) -> EstimatorHypothesis:
    x = np.zeros(NX)
    x[list(POS)] = position
    x[HDG] = geo.wrap_angle(heading)
    return EstimatorHypothesis(x, np.eye(NX) * var, **kw)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict(h: EstimatorHypothesis, model: LtiModel, u, Q: np.ndarray, dt_stamp: float | None = None
            ) -> EstimatorHypothesis:
    """Propagate one step with the unbiased acceleration ``u`` (3-vector).

    The heading subsystem receives no input.
    """
    u4 = np.zeros(4)
    u4[:3] = u
    x = model.A @ h.x + model.B @ u4
    x[HDG] = geo.wrap_angle(x[HDG])
    P = _symmetrize(model.A @ h.P @ model.A.T + Q)
    t = h.t + (model.dt if dt_stamp is None else dt_stamp)
    return replace(h, x=x, P=P, t=round(t, 9))


def innovation(h: EstimatorHypothesis, z, H: np.ndarray, R_meas: np.ndarray):
    """Innovation (heading components wrapped) and its covariance."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R_meas = np.atleast_2d(np.asarray(R_meas, dtype=float))
    if H.shape[1] != NX or H.shape[0] != z.shape[0] or R_meas.shape != (z.shape[0], z.shape[0]):
        raise DimensionMismatch(f"H {H.shape}, z {z.shape}, R {R_meas.shape}")
    y = z - H @ h.x
    for row in np.nonzero(H[:, HDG])[0]:
        y[row] = geo.wrap_angle(y[row])
    S = H @ h.P @ H.T + R_meas
    return y, S, H, R_meas


def correct(h: EstimatorHypothesis, z, H, R_meas) -> EstimatorHypothesis:
    """Kalman correction with the Joseph-form covariance update."""
    y, S, H, R_meas = innovation(h, z, H, R_meas)
    K = np.linalg.solve(S.T, (h.P @ H.T).T).T
    x = h.x + K @ y
    x[HDG] = geo.wrap_angle(x[HDG])
    I_KH = np.eye(NX) - K @ H
    P = _symmetrize(I_KH @ h.P @ I_KH.T + K @ R_meas @ K.T)
    return replace(h, x=x, P=P)


def selection_matrix(indices) -> np.ndarray:
    H = np.zeros((len(indices), NX))
    for row, i in enumerate(indices):
        H[row, i] = 1.0
    return H


def fuse_heading_rate(h: EstimatorHypothesis, R: np.ndarray, omega, r_meas: float
                      ) -> tuple[EstimatorHypothesis, bool]:
    """Correct the heading-rate state with gyro rates mapped to a heading rate.

    Returns ``(hypothesis, fused)``; near the heading singularity the
    correction is skipped and ``fused`` is False.
    """
    try:
        rate = geo.heading_rate_from_body_rates(R, omega)
    except geo.HeadingUndefined:
        return h, False
    return correct(h, [rate], selection_matrix([HDG_RATE]), [[r_meas]]), True


@dataclass
class FrameTransform:
    """p_to = rot_z(rotation) @ p_from + translation."""

    translation: np.ndarray
    rotation: float

    @property
    def is_identity(self) -> bool:
        return not self.translation.any() and self.rotation == 0.0

    def apply_point(self, p) -> np.ndarray:
        return geo.rot_z(self.rotation) @ np.asarray(p, dtype=float) + self.translation

    def apply_vector(self, v) -> np.ndarray:
        return geo.rot_z(self.rotation) @ np.asarray(v, dtype=float)

    def apply_heading(self, heading: float) -> float:
        return geo.wrap_angle(heading + self.rotation)

    def apply_state(self, x: np.ndarray) -> np.ndarray:
        """Transform a full 11-state vector (positions, derivatives, heading)."""
        out = x.copy()
        out[list(POS)] = self.apply_point(x[list(POS)])
        out[list(VEL)] = self.apply_vector(x[list(VEL)])
        out[list(ACC)] = self.apply_vector(x[list(ACC)])
        out[HDG] = self.apply_heading(x[HDG])
        return out

    def inverse(self) -> "FrameTransform":
        Rinv = geo.rot_z(-self.rotation)
        return FrameTransform(-(Rinv @ self.translation), -self.rotation)


def frame_transform(src: EstimatorHypothesis, dst: EstimatorHypothesis, tol: float = 1e-9) -> FrameTransform:
    """Rigid transform (heading rotation + translation) mapping ``src`` onto ``dst``."""
    if abs(src.t - dst.t) > tol:
        raise TimestampMismatch(f"hypotheses stamped {src.t} and {dst.t}")
    rot = geo.angle_diff(dst.heading, src.heading)
    trans = dst.position - geo.rot_z(rot) @ src.position
    return FrameTransform(trans, rot)


@dataclass
class SwitchEvent:
    t: float
    from_id: int
    to_id: int
    transform: FrameTransform
    reason: str


@dataclass
class EstimatorConfig:
    dt: float = 0.01
    p1: float = 0.9
    p2: float = 0.9
    p3: float = 0.9
    q_pos: float = 1e-5
    q_vel: float = 1e-3
    q_acc: float = 1e-2
    q_heading: float = 1e-6
    q_heading_rate: float = 1e-3
    r_pos: float = 0.05 ** 2
    r_vel: float = 0.1 ** 2
    r_heading: float = 0.02 ** 2
    r_heading_rate: float = 0.01 ** 2
    gate: float = 3.0
    n_consec: int = 10
    dropout_timeout: float = 0.1
    filters: dict = field(default_factory=lambda: {"main": {"source": "main", "measurements": ["position", "velocity", "heading"]}})

    def process_noise(self) -> np.ndarray:
        block = [self.q_pos, self.q_vel, self.q_acc]
        return np.diag(block * 3 + [self.q_heading, self.q_heading_rate])

    def model(self) -> LtiModel:
        return build_model(self.dt, self.p1, self.p2, self.p3)

    @classmethod
    def from_file(cls, path: str | Path) -> "EstimatorConfig":
        """Key-value file; filters as ``filter.<name>.source`` / ``filter.<name>.measurements``."""
        values = read_key_values(path)
        filters: dict = {}
        plain = {}
        for key, value in values.items():
            if key.startswith("filter."):
                parts = key.split(".")
                if len(parts) != 3 or parts[2] not in ("source", "measurements", "type"):
                    raise ConfigError(f"bad filter key {key!r}")
                entry = filters.setdefault(parts[1], {})
                entry[parts[2]] = str(value).split() if parts[2] == "measurements" else str(value)
            else:
                plain[key] = value
        cfg = cls(**plain)
        if filters:
            for name, entry in filters.items():
                if "source" not in entry or "measurements" not in entry:
                    raise ConfigError(f"filter {name!r} needs source and measurements")
            cfg.filters = filters
        return cfg


_MEAS_INDICES = {
    "position": list(POS),
    "height": [6],
    "horizontal_position": [0, 3],
    "velocity": list(VEL),
    "heading": [HDG],
}


class KalmanFilter:
    """One member of the bank: a hypothesis plus reliability bookkeeping."""

    def __init__(self, name: str, cfg: EstimatorConfig, source: str, measurements, hypothesis,
                 est_type: str | None = None):
        for m in measurements:
            if m not in _MEAS_INDICES:
                raise ConfigError(f"unknown measurement type {m!r}")
        self.name = name
        self.cfg = cfg
        self.source = source
        self.measurements = list(measurements)
        self.type = est_type or name
        self.model = cfg.model()
        self.Q = cfg.process_noise()
        self.h = hypothesis
        self.h.measurement_set = " ".join(self.measurements)
        self._bad = 0
        self._good = 0
        self.gated_out = False
        self.last_measurement_t = hypothesis.t

    @property
    def reliable(self) -> bool:
        return self.h.reliable

    def predict(self, u) -> None:
        self.h = predict(self.h, self.model, u, self.Q)

    def _r_for(self, m: str) -> list[float]:
        if m == "heading":
            return [self.cfg.r_heading]
        r = self.cfg.r_vel if m == "velocity" else self.cfg.r_pos
        return [r] * len(_MEAS_INDICES[m])

    def correct(self, position=None, velocity=None, heading=None) -> None:
        data = {"position": position, "velocity": velocity, "heading": heading}
        idx, z, r = [], [], []
        for m in self.measurements:
            key = "position" if m in ("height", "horizontal_position") else m
            value = data[key]
            if value is None:
                continue
            value = np.atleast_1d(np.asarray(value, dtype=float))
            if m == "height":
                value = value[2:3]
            elif m == "horizontal_position":
                value = value[:2]
            idx += _MEAS_INDICES[m]
            z += list(value)
            r += self._r_for(m)
        if not idx:
            return
        H = selection_matrix(idx)
        Rm = np.diag(r)
        y, S, _, _ = innovation(self.h, z, H, Rm)
        if self.cfg.gate is not None and math.isfinite(self.cfg.gate):
            outlier = bool(np.any(np.abs(y) > self.cfg.gate * np.sqrt(np.diag(S))))
            self._update_reliability(outlier)
        self.h = correct(self.h, z, H, Rm)
        self.last_measurement_t = self.h.t

    def _update_reliability(self, outlier: bool) -> None:
        if outlier:
            self._bad += 1
            self._good = 0
            if self._bad >= self.cfg.n_consec:
                self.gated_out = True
        else:
            self._good += 1
            self._bad = 0
            if self._good >= self.cfg.n_consec:
                self.gated_out = False

    def fuse_gyro(self, R: np.ndarray, omega) -> bool:
        self.h, ok = fuse_heading_rate(self.h, R, omega, self.cfg.r_heading_rate)
        return ok

    def update_reliability(self, t: float) -> None:
        dropout = (t - self.last_measurement_t) > self.cfg.dropout_timeout
        self.h.reliable = not (dropout or self.gated_out)


class FilterBank:
    """Ordered filters with exactly one active member."""

    def __init__(self, filters: list[KalmanFilter], active: int = 0, auto_select: bool = True):
        if not filters:
            raise ValueError("bank needs at least one filter")
        self.filters = filters
        self.active = active
        self.auto_select = auto_select
        self.requested: int | None = None
        self.events: list[SwitchEvent] = []

    def __len__(self) -> int:
        return len(self.filters)

    def index(self, name_or_id) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            return int(name_or_id)
        for i, f in enumerate(self.filters):
            if f.name == name_or_id:
                return i
        raise KeyError(name_or_id)

    @property
    def current(self) -> KalmanFilter:
        return self.filters[self.active]

    @property
    def hypothesis(self) -> EstimatorHypothesis:
        return self.current.h

    def arbiter_select(self, explicit_request=None) -> tuple[int, SwitchEvent | None]:
        return arbiter_select(self, explicit_request)


def arbiter_select(bank: FilterBank, explicit_request=None) -> tuple[int, SwitchEvent | None]:
    """Choose the active hypothesis.

    Priority: a reliable explicit request (which stays sticky), then a forced
    switch away from an unreliable active filter, then the minimum covariance
    trace (lowest index on ties).  Hypotheses themselves are never modified.
    """
    filters = bank.filters
    reliable = [i for i, f in enumerate(filters) if f.h.reliable]
    if not reliable:
        raise NoReliableFilter("no reliable filter in the bank")
    if explicit_request is not None:
        req = bank.index(explicit_request)
        if filters[req].h.reliable:
            bank.requested = req
    if bank.requested is not None and not filters[bank.requested].h.reliable:
        bank.requested = None

    old = bank.active
    if bank.requested is not None:
        new, reason = bank.requested, "request"
    elif old not in reliable:
        new, reason = min(reliable, key=lambda i: (np.trace(filters[i].h.P), i)), "unreliable"
    elif bank.auto_select:
        new, reason = min(reliable, key=lambda i: (np.trace(filters[i].h.P), i)), "min_trace"
    else:
        new, reason = old, ""

    if new == old:
        return old, None
    tf = frame_transform(filters[old].h, filters[new].h)
    event = SwitchEvent(filters[new].h.t, old, new, tf, reason)
    bank.active = new
    bank.events.append(event)
    return new, event


def build_bank(cfg: EstimatorConfig, position=(0.0, 0.0, 0.0), heading=0.0, frames: dict | None = None,
               auto_select: bool = False) -> FilterBank:
    """Filters per ``cfg.filters``; ``frames`` maps source -> (offset, heading offset)."""
    frames = frames or {}
    filters = []
    for name, entry in cfg.filters.items():
        offset, dh = frames.get(entry["source"], (np.zeros(3), 0.0))
        p0 = geo.rot_z(dh) @ np.asarray(position, dtype=float) + offset
        h = initial_hypothesis(p0, heading + dh, var=0.01, frame=entry["source"])
        filters.append(KalmanFilter(name, cfg, entry["source"], entry["measurements"], h,
                                    est_type=entry.get("type")))
    return FilterBank(filters, auto_select=auto_select)

"""Scenario configuration, the event script and the builtin experiment set."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..config import (ConfigError, ConstraintGroup, GainGroup, default_constraint_groups, default_gain_groups,
                      load_yaml)
from ..estimation import EstimatorConfig
from ..simulator import VehicleParams
from ..tracking import TrajectorySetpoint

EVENT_KINDS = {
    "setpoint", "trajectory", "speed", "switch_controller", "switch_tracker", "switch_estimator",
    "inject_wind", "inject_jump", "inject_noise", "cut_localization", "restore_localization",
    "add_mass", "takeoff", "land", "set_constraints", "set_gains", "pin",
}
CONTROLLERS = ("se3", "mpc")
TRACKERS = ("mpc", "speed", "landoff")


@dataclass
class Event:
    t: float
    kind: str
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = float(self.t)
        if self.kind not in EVENT_KINDS:
            raise ConfigError(f"unknown event kind {self.kind!r}")
        self.args = dict(self.args or {})


def _event(item) -> Event:
    if isinstance(item, Event):
        return item
    if not isinstance(item, dict) or "t" not in item or "kind" not in item:
        raise ConfigError(f"event needs 't' and 'kind': {item!r}")
    rest = {k: v for k, v in item.items() if k not in ("t", "kind", "args")}
    rest.update(item.get("args") or {})
    return Event(item["t"], item["kind"], rest)


@dataclass
class ScenarioConfig:
    """Everything a run needs; plain data so it round-trips through YAML.

    ``sources`` maps a measurement-source name to :class:`MeasurementConfig`
    keyword arguments (seeds are derived from ``seed``).  ``vehicle`` and
    ``estimator`` hold field overrides, optionally on top of the key-value
    files named by ``vehicle_file`` and ``estimator_file``.
    """

    name: str = "custom"
    description: str = ""
    duration: float = 10.0
    seed: int = 0
    vehicle: dict = field(default_factory=dict)
    vehicle_file: str | None = None
    estimator: dict = field(default_factory=dict)
    estimator_file: str | None = None
    sources: dict = field(default_factory=lambda: {"main": {}})
    constraints: str = "medium"
    controller_constraints: str = "medium"
    gains: str = "medium"
    constraint_groups: dict = field(default_factory=dict)
    gain_groups: dict = field(default_factory=dict)
    controller: str = "se3"
    tracker: str = "mpc"
    start: str = "air"
    position: list = field(default_factory=lambda: [0.0, 0.0, 2.0])
    heading: float = 0.0
    takeoff_height: float = 2.0
    takeoff_timeout: float = 30.0
    landing_timeout: float = 60.0
    admittance_radius: float = 0.5
    construction: str = "heading_compliant"
    parasitic: bool = True
    max_tilt_deg: float = 60.0
    k_fs: float = 0.01
    integrate_max_error: float = 1.0
    integrate_max_speed_error: float = 0.5
    mpc_integral_scale: float = 0.2
    wind: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    pinned: bool = False
    speed_cutoff_hz: float = 1.0
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.events = sorted((_event(e) for e in self.events), key=lambda e: e.t)
        self.validate()

    # validation and derived objects

    def validate(self) -> None:
        if not self.duration > 0.0:
            raise ConfigError("duration must be positive")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}")
        if self.tracker not in ("mpc", "speed"):
            raise ConfigError(f"unknown tracker {self.tracker!r}")
        if self.start not in ("air", "ground"):
            raise ConfigError("start must be 'air' or 'ground'")
        if len(self.position) != 3:
            raise ConfigError("position must have 3 components")
        if not self.sources:
            raise ConfigError("at least one measurement source is required")
        cgs = self.constraint_group_map()
        for name in (self.constraints, self.controller_constraints):
            if name not in cgs:
                raise ConfigError(f"unknown constraint group {name!r}")
        if self.gains not in self.gain_group_map():
            raise ConfigError(f"unknown gain group {self.gains!r}")
        times = [e.t for e in self.events]
        if times != sorted(times):
            raise ConfigError("events must be time-ordered")
        est = self.estimator_config()
        for fname, entry in est.filters.items():
            if entry["source"] not in self.sources:
                raise ConfigError(f"filter {fname!r} uses unknown source {entry['source']!r}")
        for e in self.events:
            if e.kind == "set_constraints" and e.args.get("group") not in cgs:
                raise ConfigError(f"event at {e.t}: unknown constraint group {e.args.get('group')!r}")
            if e.kind == "set_gains" and e.args.get("group") not in self.gain_group_map():
                raise ConfigError(f"event at {e.t}: unknown gain group {e.args.get('group')!r}")
            if e.kind == "switch_controller" and e.args.get("controller") not in CONTROLLERS:
                raise ConfigError(f"event at {e.t}: unknown controller {e.args.get('controller')!r}")
            if e.kind == "switch_estimator" and e.args.get("filter") not in est.filters:
                raise ConfigError(f"event at {e.t}: unknown filter {e.args.get('filter')!r}")

    def vehicle_params(self) -> VehicleParams:
        base = VehicleParams.from_file(self.vehicle_file) if self.vehicle_file else VehicleParams()
        vals = {f.name: getattr(base, f.name) for f in fields(VehicleParams)}
        unknown = set(self.vehicle) - set(vals)
        if unknown:
            raise ConfigError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        vals.update(self.vehicle)
        return VehicleParams(**vals)

    def estimator_config(self) -> EstimatorConfig:
        base = EstimatorConfig.from_file(self.estimator_file) if self.estimator_file else EstimatorConfig()
        vals = {f.name: getattr(base, f.name) for f in fields(EstimatorConfig)}
        unknown = set(self.estimator) - set(vals)
        if unknown:
            raise ConfigError(f"unknown estimator parameter(s): {sorted(unknown)}")
        vals.update(copy.deepcopy(self.estimator))
        if vals.get("gate") is not None:
            vals["gate"] = float(vals["gate"])
        return EstimatorConfig(**vals)

    def constraint_group_map(self) -> dict[str, ConstraintGroup]:
        groups = default_constraint_groups()
        for name, vals in self.constraint_groups.items():
            groups[name] = ConstraintGroup(name=name, **vals)
        return groups

    def gain_group_map(self) -> dict[str, GainGroup]:
        groups = default_gain_groups()
        for name, vals in self.gain_groups.items():
            groups[name] = GainGroup(name=name, **{k: np.asarray(v, dtype=float) for k, v in vals.items()})
        return groups

    # serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["events"] = [{"t": e.t, "kind": e.kind, **e.args} for e in self.events]
        return _plain(d)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {sorted(unknown)}")
        return cls(**copy.deepcopy(data))

    def with_overrides(self, overrides: dict) -> "ScenarioConfig":
        """Copy with dotted-key overrides, e.g. ``{"sources.main.sigma_pos": 1.0}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return ScenarioConfig.from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def load_scenario(path: str | Path, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Read a YAML scenario; keys override ``base`` when given."""
    data = load_yaml(path)
    if base is None:
        return ScenarioConfig.from_dict(data)
    d = base.to_dict()
    for key, value in data.items():
        if isinstance(value, dict) and isinstance(d.get(key), dict):
            d[key].update(value)
        else:
            d[key] = value
    return ScenarioConfig.from_dict(d)


# trajectories


def circle_trajectory(center, radius: float, speed: float, laps: float, heading: str = "center",
                      ramp: float = 3.0, period: float = 0.02, t0: float = 0.0,
                      fixed_heading: float = 0.0) -> TrajectorySetpoint:
    """Horizontal circle starting at angle 0, with a linear speed ramp of ``ramp`` seconds.

    ``heading`` is ``"center"`` (pointing at the center) or ``"constant"``.
    """
    c = np.asarray(center, dtype=float)
    t_lap = 2.0 * math.pi * radius / speed
    total = ramp + laps * t_lap
    t = np.arange(0.0, total + period / 2, period)
    # arc length with a linear speed ramp
    s = np.where(t < ramp, 0.5 * speed * t * t / ramp if ramp > 0 else speed * t, 0.5 * speed * ramp + speed * (t - ramp))
    th = s / radius
    pos = np.column_stack((c[0] + radius * np.cos(th), c[1] + radius * np.sin(th), np.full_like(th, c[2])))
    if heading == "center":
        hdg = th + math.pi
    elif heading == "constant":
        hdg = np.full_like(th, fixed_heading)
    else:
        raise ConfigError(f"unknown circle heading mode {heading!r}")
    return TrajectorySetpoint(pos, np.angle(np.exp(1j * hdg)), period, t0)


def heading_spin(position, rate: float, duration: float, period: float = 0.1, t0: float = 0.0,
                 heading0: float = 0.0) -> TrajectorySetpoint:
    t = np.arange(0.0, duration + period / 2, period)
    pos = np.broadcast_to(np.asarray(position, dtype=float), (len(t), 3))
    return TrajectorySetpoint(pos, np.angle(np.exp(1j * (heading0 + rate * t))), period, t0)


def trajectory_from_event(args: dict, t0: float) -> TrajectorySetpoint:
    kind = args.get("shape", "points")
    if kind == "circle":
        return circle_trajectory(args.get("center", [0.0, 0.0, 2.0]), float(args.get("radius", 5.0)),
                                 float(args.get("speed", 7.0)), float(args.get("laps", 3.0)),
                                 args.get("heading", "center"), float(args.get("ramp", 3.0)),
                                 float(args.get("period", 0.02)), t0, float(args.get("fixed_heading", 0.0)))
    if kind == "spin":
        return heading_spin(args["position"], float(args.get("rate", 0.3)), float(args.get("duration", 30.0)),
                            t0=t0, heading0=float(args.get("heading0", 0.0)))
    if kind == "points":
        pos = np.asarray(args["positions"], dtype=float)
        hdg = np.asarray(args.get("headings", np.zeros(len(pos))), dtype=float)
        return TrajectorySetpoint(pos, hdg, float(args.get("period", 0.2)), t0)
    raise ConfigError(f"unknown trajectory shape {kind!r}")


# builtin scenarios

FIG5 = {
    "horizontal_speed": 9.0, "horizontal_acceleration": 12.0, "horizontal_jerk": 50.0, "horizontal_snap": 50.0,
    "vertical_ascending_speed": 9.0, "vertical_ascending_acceleration": 12.0,
    "vertical_ascending_jerk": 50.0, "vertical_ascending_snap": 50.0,
    # a multirotor cannot push down: the descending limits stay below gravity
    "vertical_descending_speed": 5.0, "vertical_descending_acceleration": 5.0,
    "vertical_descending_jerk": 50.0, "vertical_descending_snap": 50.0,
    "heading_speed": 3.0, "heading_acceleration": 6.0, "heading_jerk": 30.0, "heading_snap": 60.0,
}


def _noise_estimator(sigma: float) -> dict:
    r = max(sigma, 0.05) ** 2
    return {"r_pos": r, "r_vel": max(sigma, 0.1) ** 2, "gate": math.inf}


def _hover():
    return ScenarioConfig("hover", "Position hold at 2 m", 10.0, events=[{"t": 0.0, "kind": "setpoint",
                                                                            "position": [0, 0, 2]}])


def _step1d():
    ev = [{"t": 1.0, "kind": "setpoint", "position": [30, 0, 3]},
          {"t": 9.0, "kind": "setpoint", "position": [0, 0, 3]},
          {"t": 17.0, "kind": "setpoint", "position": [15, 0, 3]}]
    return ScenarioConfig("step1d", "Steps along x with the aggressive tracker limits", 24.0,
                          constraints="fig5", constraint_groups={"fig5": FIG5}, gains="tight",
                          position=[0, 0, 3], events=ev)


def _step3d():
    ev = [{"t": 1.0, "kind": "setpoint", "position": [30, 20, 10]},
          {"t": 10.0, "kind": "setpoint", "position": [0, 0, 4]}]
    return ScenarioConfig("step3d", "3D step with the aggressive tracker limits", 18.0,
                          constraints="fig5", constraint_groups={"fig5": FIG5}, gains="tight",
                          position=[0, 0, 4], events=ev)


def _circle(heading: str):
    laps = 3.0
    ramp = 3.0
    dur = 1.0 + ramp + laps * 2 * math.pi * 5 / 7 + 2.0
    ev = [{"t": 1.0, "kind": "trajectory", "shape": "circle", "center": [0, 0, 3], "radius": 5.0,
           "speed": 7.0, "laps": laps, "heading": heading, "ramp": ramp,
           "fixed_heading": 0.0}]
    h0 = math.pi if heading == "center" else 0.0
    name = "circle_center_heading" if heading == "center" else "circle_const_heading"
    return ScenarioConfig(name, f"5 m / 7 m/s circle, heading {heading}", round(dur, 2),
                          constraints="fig5", constraint_groups={"fig5": FIG5}, gains="tight",
                          position=[5, 0, 3], heading=h0, events=ev)


def noise_scenario(sigma: float, controller: str = "mpc") -> ScenarioConfig:
    """Hover on position/velocity measurements with noise ``sigma``, estimator matched to it."""
    return ScenarioConfig("noise_sweep", "Hover on noisy position/velocity measurements", 20.0,
                          controller=controller, sources={"main": {"sigma_pos": sigma, "sigma_vel": sigma}},
                          estimator=_noise_estimator(sigma),
                          events=[{"t": 0.0, "kind": "setpoint", "position": [0, 0, 2]}])


def _noise_sweep():
    return noise_scenario(1.0)


def _position_jump():
    return ScenarioConfig("position_jump", "5 m jump of the position measurement under MPC control", 15.0,
                          controller="mpc", estimator={"gate": math.inf},
                          events=[{"t": 0.0, "kind": "setpoint", "position": [0, 0, 3]},
                                  {"t": 3.0, "kind": "inject_jump", "source": "main", "offset": [5, 0, 0]}],
                          position=[0, 0, 3])


def _wind_step():
    return ScenarioConfig("wind_step", "1 N wind step during a heading spin", 25.0,
                          events=[{"t": 0.0, "kind": "trajectory", "shape": "spin", "position": [0, 0, 2],
                                   "rate": 1.0, "duration": 30.0},
                                  {"t": 2.0, "kind": "inject_wind", "force": [1, 0, 0]}])


def _mass_step():
    return ScenarioConfig("mass_step", "+0.2 kg payload while hovering", 20.0,
                          events=[{"t": 0.0, "kind": "setpoint", "position": [0, 0, 2]},
                                  {"t": 2.0, "kind": "add_mass", "mass": 0.2}])


def _failsafe_cut():
    return ScenarioConfig("failsafe_cut", "Localization lost at 2 m; failsafe descent", 15.0,
                          events=[{"t": 0.0, "kind": "setpoint", "position": [0, 0, 2]},
                                  {"t": 2.0, "kind": "cut_localization"}])


def _takeoff_land():
    return ScenarioConfig("takeoff_land", "Takeoff, short flight, landing and disarm", 40.0, start="ground",
                          position=[0, 0, 0], takeoff_height=3.0,
                          events=[{"t": 0.5, "kind": "takeoff"},
                                  {"t": 8.0, "kind": "setpoint", "position": [3, 2, 3]},
                                  {"t": 16.0, "kind": "land"}])


def _takeoff_pinned():
    return ScenarioConfig("takeoff_pinned", "Takeoff with the vehicle held on the ground", 8.0, start="ground",
                          position=[0, 0, 0], takeoff_height=3.0, pinned=True,
                          events=[{"t": 0.5, "kind": "takeoff"}])


def _estimator_switch():
    est = {"filters": {"gps": {"source": "gps", "measurements": ["position", "velocity", "heading"]},
                       "slam": {"source": "slam", "measurements": ["position", "velocity", "heading"]}}}
    return ScenarioConfig("estimator_switch", "Switch to a filter whose frame is offset by 5 m", 15.0,
                          estimator=est, sources={"gps": {}, "slam": {"frame_offset": [5, 0, 0]}},
                          events=[{"t": 0.0, "kind": "setpoint", "position": [4, 2, 3]},
                                  {"t": 3.0, "kind": "switch_estimator", "filter": "slam"}])


def _controller_switch():
    return ScenarioConfig("controller_switch", "SE(3) to MPC at hover, then back during cruise", 16.0,
                          events=[{"t": 0.0, "kind": "setpoint", "position": [0, 0, 2]},
                                  {"t": 3.0, "kind": "switch_controller", "controller": "mpc"},
                                  {"t": 5.0, "kind": "setpoint", "position": [12, 0, 2]},
                                  {"t": 9.0, "kind": "switch_controller", "controller": "se3"}])


def _speed_cruise():
    return ScenarioConfig("speed_cruise", "Speed tracker: horizontal velocity command at fixed height", 12.0,
                          tracker="speed",
                          events=[{"t": 1.0, "kind": "speed", "velocity": [1.0, 0.5], "height": 2.0,
                                   "heading": 0.3},
                                  {"t": 7.0, "kind": "speed", "velocity": [0.0, 0.0], "height": 2.0,
                                   "heading": 0.3}])


BUILTINS = {
    "hover": _hover,
    "step1d": _step1d,
    "step3d": _step3d,
    "circle_center_heading": lambda: _circle("center"),
    "circle_const_heading": lambda: _circle("constant"),
    "noise_sweep": _noise_sweep,
    "position_jump": _position_jump,
    "wind_step": _wind_step,
    "mass_step": _mass_step,
    "failsafe_cut": _failsafe_cut,
    "takeoff_land": _takeoff_land,
    "takeoff_pinned": _takeoff_pinned,
    "estimator_switch": _estimator_switch,
    "controller_switch": _controller_switch,
    "speed_cruise": _speed_cruise,
}


def builtin(name: str) -> ScenarioConfig:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; see 'list'") from None



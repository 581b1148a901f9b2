"""Configuration readers and the named gain/constraint group manager."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    text = text.strip()
    if "," in text and not text.startswith("["):
        return np.array([float(p) for p in text.split(",")])
    value = yaml.safe_load(text)
    if isinstance(value, list):
        return np.array(value, dtype=float)
    return value


def read_key_values(path: str | Path) -> dict:
    """Parse a ``key: value`` (or ``key = value``) text file.

    Blank lines and ``#`` comments are ignored.  Comma-separated or bracketed
    values become float arrays.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in (":", "="):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ConfigError(f"{path}:{lineno}: expected 'key: value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_yaml(path: str | Path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


@dataclass
class ConstraintGroup:
    """Dynamic limits for one named group; all values strictly positive."""

    name: str = "medium"
    horizontal_speed: float = 2.0
    horizontal_acceleration: float = 2.0
    horizontal_jerk: float = 5.0
    horizontal_snap: float = 10.0
    vertical_ascending_speed: float = 1.0
    vertical_ascending_acceleration: float = 1.0
    vertical_ascending_jerk: float = 5.0
    vertical_ascending_snap: float = 10.0
    vertical_descending_speed: float = 1.0
    vertical_descending_acceleration: float = 1.0
    vertical_descending_jerk: float = 5.0
    vertical_descending_snap: float = 10.0
    heading_speed: float = 1.0
    heading_acceleration: float = 2.0
    heading_jerk: float = 10.0
    heading_snap: float = 20.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "name":
                continue
            if not getattr(self, f.name) > 0.0:
                raise ConfigError(f"constraint {f.name} of group {self.name!r} must be positive")

    @classmethod
    def uniform(cls, name: str, speed: float, acc: float, jerk: float, snap: float,
                heading: tuple[float, float, float, float] | None = None) -> "ConstraintGroup":
        """Same limits on all translational axes."""
        kw = {}
        for prefix in ("horizontal", "vertical_ascending", "vertical_descending"):
            kw[f"{prefix}_speed"] = speed
            kw[f"{prefix}_acceleration"] = acc
            kw[f"{prefix}_jerk"] = jerk
            kw[f"{prefix}_snap"] = snap
        if heading is not None:
            kw.update(zip(("heading_speed", "heading_acceleration", "heading_jerk", "heading_snap"), heading))
        return cls(name=name, **kw)

    def scaled(self, factor: float, name: str | None = None) -> "ConstraintGroup":
        vals = {f.name: getattr(self, f.name) * factor for f in fields(self) if f.name != "name"}
        return ConstraintGroup(name=name or self.name, **vals)

    def capped(self, other: "ConstraintGroup") -> "ConstraintGroup":
        """Element-wise minimum with ``other``."""
        vals = {f.name: min(getattr(self, f.name), getattr(other, f.name))
                for f in fields(self) if f.name != "name"}
        return ConstraintGroup(name=self.name, **vals)

    def axis_limits(self, axis: str, ascending: bool = True) -> tuple[float, float, float, float]:
        """(speed, acceleration, jerk, snap) for ``axis`` in {'h', 'v', 'heading'}."""
        if axis == "h":
            p = "horizontal"
        elif axis == "v":
            p = "vertical_ascending" if ascending else "vertical_descending"
        elif axis == "heading":
            p = "heading"
        else:
            raise ValueError(axis)
        return tuple(getattr(self, f"{p}_{k}") for k in ("speed", "acceleration", "jerk", "snap"))


@dataclass
class GainGroup:
    name: str = "medium"
    k_p: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 10.0]))
    k_v: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 6.0]))
    k_R: np.ndarray = field(default_factory=lambda: np.array([10.0, 10.0, 5.0]))
    k_iw: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 12.0]))
    k_ib: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 0.0]))

    def __post_init__(self):
        for name in ("k_p", "k_v", "k_R", "k_iw", "k_ib"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape == ():
                v = np.full(3, float(v))
            if v.shape != (3,) or (v < 0.0).any():
                raise ConfigError(f"gain {name} of group {self.name!r} must be 3 non-negative values")
            setattr(self, name, v)


class GroupManager:
    """Named groups with per-estimator-type allow lists and a fallback group.

    Mirrors the constraint/gain manager behaviour: switching the estimator
    type falls back to the type's default group when the current group is not
    allowed for it, and explicit requests are honoured only within the
    allow list.
    """

    def __init__(self, groups: dict, allowed: dict[str, list[str]] | None = None,
                 fallback: dict[str, str] | None = None, current: str | None = None,
                 estimator_type: str = "default"):
        if not groups:
            raise ConfigError("at least one group is required")
        self.groups = dict(groups)
        self.allowed = {k: list(v) for k, v in (allowed or {}).items()}
        self.fallback = dict(fallback or {})
        for lst in list(self.allowed.values()) + [[v] for v in self.fallback.values()]:
            for g in lst:
                if g not in self.groups:
                    raise ConfigError(f"unknown group {g!r}")
        self.estimator_type = estimator_type
        self.current = current if current is not None else self._fallback_for(estimator_type)
        if self.current not in self.groups:
            raise ConfigError(f"unknown group {self.current!r}")

    def _allowed_for(self, est_type: str) -> list[str]:
        return self.allowed.get(est_type, list(self.groups))

    def _fallback_for(self, est_type: str) -> str:
        if est_type in self.fallback:
            return self.fallback[est_type]
        return self._allowed_for(est_type)[0]

    @property
    def active(self):
        return self.groups[self.current]

    def request(self, name: str) -> bool:
        if name in self.groups and name in self._allowed_for(self.estimator_type):
            self.current = name
            return True
        return False

    def on_estimator_type(self, est_type: str) -> str:
        self.estimator_type = est_type
        if self.current not in self._allowed_for(est_type):
            self.current = self._fallback_for(est_type)
        return self.current


def _vector_or_scalar(v):
    return np.asarray(v, dtype=float)


def load_constraint_groups(path: str | Path) -> GroupManager:
    """YAML: ``groups: {name: {field: value}}``, optional ``allowed`` and ``fallback``."""
    data = load_yaml(path)
    groups = {name: ConstraintGroup(name=name, **vals) for name, vals in data.get("groups", {}).items()}
    return GroupManager(groups, data.get("allowed"), data.get("fallback"), data.get("default"))


def load_gain_groups(path: str | Path) -> GroupManager:
    data = load_yaml(path)
    groups = {}
    for name, vals in data.get("groups", {}).items():
        groups[name] = GainGroup(name=name, **{k: _vector_or_scalar(v) for k, v in vals.items()})
    return GroupManager(groups, data.get("allowed"), data.get("fallback"), data.get("default"))


def default_constraint_groups() -> dict[str, ConstraintGroup]:
    return {
        "slow": ConstraintGroup.uniform("slow", 1.0, 1.0, 2.5, 5.0, heading=(0.5, 1.0, 5.0, 10.0)),
        "medium": ConstraintGroup.uniform("medium", 2.0, 2.0, 5.0, 10.0, heading=(1.0, 2.0, 10.0, 20.0)),
        "fast": ConstraintGroup.uniform("fast", 9.0, 12.0, 50.0, 50.0, heading=(3.0, 6.0, 30.0, 60.0)),
    }


def default_gain_groups() -> dict[str, GainGroup]:
    return {
        "soft": GainGroup("soft", k_p=np.array([3.0, 3.0, 6.0]), k_v=np.array([2.5, 2.5, 4.0])),
        "medium": GainGroup("medium"),
        "tight": GainGroup("tight", k_p=np.array([10.0, 10.0, 14.0]), k_v=np.array([5.5, 5.5, 7.0]),
                           k_R=np.array([14.0, 14.0, 7.0])),
    }

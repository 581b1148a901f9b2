"""Run log schema, CSV round trip and summary metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..config import ConstraintGroup

XYZ = ("x", "y", "z")


def _vec(prefix: str, names=XYZ) -> list[str]:
    return [f"{prefix}_{n}" for n in names]


COLUMNS = (
    ["t"]
    + _vec("r") + _vec("v") + ["heading", "tilt"]
    + _vec("est_r") + _vec("est_v") + ["est_heading"]
    + _vec("ref_r") + _vec("ref_v") + _vec("ref_a") + _vec("ref_j") + ["ref_heading", "ref_heading_rate"]
    + _vec("f_d") + _vec("omega_d") + ["thrust"]
    + _vec("d_w") + _vec("d_b") + ["m_e", "pos_error"]
    + ["filter", "controller", "mode"]
)
TEXT_COLUMNS = ("filter", "controller", "mode")
METRIC_KEYS = ("avg_position_error", "max_position_error", "max_speed", "max_acceleration", "max_tilt",
               "constraint_violations", "settle_time")


class EmptyLog(ValueError):
    pass


@dataclass
class RunLog:
    """Per-tick columns (numeric arrays plus the text columns) and discrete events."""

    data: dict
    events: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        missing = [c for c in COLUMNS if c not in self.data]
        if missing:
            raise ValueError(f"log is missing columns {missing}")

    def __len__(self) -> int:
        return len(self.data["t"])

    def __getitem__(self, key: str) -> np.ndarray:
        return self.data[key]

    def vec(self, prefix: str) -> np.ndarray:
        return np.column_stack([self.data[c] for c in _vec(prefix)])

    def rows(self, mask: np.ndarray) -> "RunLog":
        return RunLog({k: v[mask] for k, v in self.data.items()}, list(self.events), self.name)

    @classmethod
    def from_rows(cls, rows: list, events=None, name: str = "") -> "RunLog":
        data = {}
        for i, c in enumerate(COLUMNS):
            col = [r[i] for r in rows]
            data[c] = np.array(col, dtype=object if c in TEXT_COLUMNS else float)
            if c in TEXT_COLUMNS:
                data[c] = data[c].astype(str)
        return cls(data, list(events or []), name)


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    return "%.6g" % value


def write_csv(log: RunLog, path: str | Path) -> Path:
    if len(log) == 0:
        raise EmptyLog("refusing to write a log without rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [log.data[c] for c in COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(log)):
            w.writerow([_fmt(c[i]) for c in cols])
    return path


def read_csv(path: str | Path) -> RunLog:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != tuple(COLUMNS):
            raise ValueError(f"{path}: unexpected header")
        rows = []
        for line in r:
            rows.append([v if c in TEXT_COLUMNS else float(v) for c, v in zip(COLUMNS, line)])
    if not rows:
        raise EmptyLog(f"{path}: no data rows")
    return RunLog.from_rows(rows, name=Path(path).stem)


@dataclass
class SummaryMetrics:
    avg_position_error: float
    max_position_error: float
    max_speed: float
    max_acceleration: float
    max_tilt: float
    constraint_violations: int
    settle_time: float

    def as_text(self) -> str:
        return "\n".join(f"{k}: {_fmt(v) if isinstance(v, float) else v}" for k, v in asdict(self).items())

    @classmethod
    def parse(cls, text: str) -> "SummaryMetrics":
        vals = {}
        for line in text.strip().splitlines():
            k, v = line.split(":", 1)
            vals[k.strip()] = v.strip()
        return cls(**{k: (int(vals[k]) if k == "constraint_violations" else float(vals[k])) for k in METRIC_KEYS})


def truth_acceleration(log: RunLog) -> np.ndarray:
    v = log.vec("v")
    dt = np.diff(log["t"])
    acc = np.zeros_like(v)
    if len(v) > 1:
        acc[1:] = np.diff(v, axis=0) / dt[:, None]
    return acc


def count_violations(log: RunLog, cg: ConstraintGroup, tol: float = 1e-6) -> int:
    h = cg.axis_limits("h")
    up = cg.axis_limits("v", True)
    dn = cg.axis_limits("v", False)
    v, a, j = log.vec("ref_v"), log.vec("ref_a"), log.vec("ref_j")
    bad = (
        (np.abs(v[:, :2]).max(axis=1) > h[0] + tol)
        | (np.abs(a[:, :2]).max(axis=1) > h[1] + tol)
        | (np.abs(j[:, :2]).max(axis=1) > h[2] + tol)
        | (v[:, 2] > up[0] + tol) | (v[:, 2] < -dn[0] - tol)
        | (np.abs(a[:, 2]) > max(up[1], dn[1]) + tol)
        | (np.abs(j[:, 2]) > max(up[2], dn[2]) + tol)
        | (np.abs(log["ref_heading_rate"]) > cg.heading_speed + tol)
    )
    return int(bad.sum())


def summarize(log: RunLog, cg: ConstraintGroup | None = None, settle_tol: float = 0.1) -> SummaryMetrics:
    """Metrics over the airborne part of the run (modes flying, takeoff, landing)."""
    if len(log) == 0:
        raise EmptyLog("no rows to summarize")
    fly = np.isin(log["mode"], ("flying", "takeoff", "landing"))
    sub = log.rows(fly) if fly.any() else log
    err = sub["pos_error"]
    acc = truth_acceleration(log)[fly] if fly.any() else truth_acceleration(log)
    speed = np.linalg.norm(sub.vec("v"), axis=1)
    # settle: first time after which the error stays below the tolerance
    settle = math.nan
    if len(err):
        above = np.nonzero(err >= settle_tol)[0]
        if len(above) == 0:
            settle = float(sub["t"][0])
        elif above[-1] + 1 < len(err):
            settle = float(sub["t"][above[-1] + 1])
    return SummaryMetrics(
        avg_position_error=float(err.mean()) if len(err) else math.nan,
        max_position_error=float(err.max()) if len(err) else math.nan,
        max_speed=float(speed.max()) if len(speed) else 0.0,
        max_acceleration=float(np.linalg.norm(acc, axis=1).max()) if len(acc) else 0.0,
        max_tilt=float(log["tilt"].max()),
        constraint_violations=count_violations(sub, cg) if cg is not None else 0,
        settle_time=settle,
    )


def emit_report(log: RunLog, out_dir: str | Path, metrics: SummaryMetrics | None = None,
                cg: ConstraintGroup | None = None) -> tuple[Path, Path, SummaryMetrics]:
    """Write ``<name>.csv`` and ``<name>_metrics.txt``; returns their paths and the metrics."""
    if len(log) == 0:
        raise EmptyLog("refusing to report an empty run")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = log.name or "run"
    csv_path = write_csv(log, out / f"{name}.csv")
    metrics = metrics or summarize(log, cg)
    m_path = out / f"{name}_metrics.txt"
    m_path.write_text(metrics.as_text() + "\n")
    return csv_path, m_path, metrics

"""Scenario orchestration: closed-loop runs, builtin experiments and reports."""

from .report import COLUMNS, EmptyLog, RunLog, SummaryMetrics, emit_report, read_csv, summarize, write_csv
from .runner import (FlightStack, LandingTimeout, RunResult, ScenarioDiverged, TakeoffTimeout, run_scenario)
from .scenario import BUILTINS, Event, ScenarioConfig, builtin, load_scenario, noise_scenario

__all__ = [
    "BUILTINS", "COLUMNS", "EmptyLog", "Event", "FlightStack", "LandingTimeout", "RunLog", "RunResult",
    "ScenarioConfig", "ScenarioDiverged", "SummaryMetrics", "TakeoffTimeout", "builtin", "emit_report",
    "load_scenario", "noise_scenario", "read_csv", "run_scenario", "summarize", "write_csv",
]

"""Command line entry point: list, run, sweep and check."""

from __future__ import annotations

import argparse
import itertools
import sys
from pathlib import Path

import yaml

from .config import ConfigError
from .harness import BUILTINS, ScenarioDiverged, builtin, emit_report, load_scenario, run_scenario
from .harness.runner import LandingTimeout, TakeoffTimeout


def _parse_value(text: str):
    return yaml.safe_load(text)


def _parse_assignments(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def _scenario(args):
    cfg = builtin(args.scenario)
    if args.config:
        cfg = load_scenario(args.config, base=cfg)
    overrides = _parse_assignments(getattr(args, "set", None))
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_list(args) -> int:
    width = max(len(n) for n in BUILTINS)
    for name in BUILTINS:
        print(f"{name:<{width}}  {builtin(name).description}")
    return 0


def cmd_run(args) -> int:
    cfg = _scenario(args)
    result = run_scenario(cfg)
    result.log.name = cfg.name
    csv_path, m_path, metrics = emit_report(result.log, args.out, result.metrics)
    print(metrics.as_text())
    print(f"wall_time: {result.wall_time:.3f}")
    print(f"# wrote {csv_path} and {m_path}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    base = _scenario(args)
    grid = []
    for item in args.param:
        key, sep, values = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=v1,v2,..., got {item!r}")
        grid.append((key, [_parse_value(v) for v in values.split(",")]))
    keys = [k for k, _ in grid]
    print("\t".join(keys + ["avg_position_error", "max_position_error", "max_speed", "max_acceleration",
                            "max_tilt", "constraint_violations"]))
    for combo in itertools.product(*(vals for _, vals in grid)):
        cfg = base.with_overrides(dict(zip(keys, combo)))
        result = run_scenario(cfg)
        tag = "__".join(f"{k}={v}" for k, v in zip(keys, combo)).replace("/", "_")
        result.log.name = f"{cfg.name}__{tag}"
        if args.out:
            emit_report(result.log, args.out, result.metrics)
        m = result.metrics
        row = [str(v) for v in combo] + [f"{m.avg_position_error:.6g}", f"{m.max_position_error:.6g}",
                                         f"{m.max_speed:.6g}", f"{m.max_acceleration:.6g}", f"{m.max_tilt:.6g}",
                                         str(m.constraint_violations)]
        print("\t".join(row))
    return 0


def cmd_check(args) -> int:
    from . import acceptance

    numbers = None
    if args.only:
        try:
            numbers = [int(x) for x in args.only.split(",")]
        except ValueError:
            raise ConfigError(f"--only expects comma-separated integers, got {args.only!r}") from None
        unknown = sorted(set(numbers) - set(acceptance.CRITERIA))
        if unknown:
            raise ConfigError(f"unknown criteria {unknown}; valid are 1-{max(acceptance.CRITERIA)}")
    results = acceptance.run_all(numbers, echo=lambda line: print(line, flush=True))
    failed = [c.number for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flightstack", description="Multirotor control stack simulation harness")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("list", help="list builtin scenarios").set_defaults(func=cmd_list)

    def scenario_args(p):
        p.add_argument("scenario", help="builtin scenario name (see 'list')")
        p.add_argument("--config", help="YAML file whose keys override the builtin")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key override, e.g. sources.main.sigma_pos=0.5")

    p = sub.add_parser("run", help="run one scenario and write <name>.csv and <name>_metrics.txt")
    scenario_args(p)
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario over a parameter grid")
    scenario_args(p)
    p.add_argument("--param", action="append", required=True, metavar="KEY=V1,V2",
                   help="dotted key and comma-separated values; repeat for a grid")
    p.add_argument("--out", help="also write each run's CSV and metrics here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="run the acceptance suite; exit 1 on any failure")
    p.add_argument("--only", help="comma-separated criterion numbers")
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScenarioDiverged, TakeoffTimeout, LandingTimeout) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

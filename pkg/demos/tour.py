"""Run a handful of builtin scenarios and print their summary metrics.

    python demos/tour.py [out_dir]
"""

import math
import sys
from pathlib import Path

from flightstack.harness import builtin, emit_report, run_scenario

SCENARIOS = ("hover", "step3d", "circle_center_heading", "position_jump", "takeoff_land")


def main(out_dir="demo_runs"):
    out = Path(out_dir)
    for name in SCENARIOS:
        cfg = builtin(name)
        res = run_scenario(cfg)
        res.log.name = name
        _, m_path, m = emit_report(res.log, out, res.metrics)
        print(f"{name:<22} avg_err={m.avg_position_error:.4f} m  max_speed={m.max_speed:.2f} m/s  "
              f"max_tilt={math.degrees(m.max_tilt):.1f} deg  violations={m.constraint_violations}  ({res.wall_time:.1f} s)")
    print(f"logs written to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:2])

"""Compare SE(3) and MPC tilt under increasing position noise.

    python demos/noise_sweep.py
"""

import math

from flightstack.harness import noise_scenario, run_scenario

for controller in ("se3", "mpc"):
    for sigma in (0.0, 0.1, 1.0, 2.0):
        m = run_scenario(noise_scenario(sigma, controller)).metrics
        print(f"{controller:<4} sigma={sigma:<4} max_tilt={math.degrees(m.max_tilt):6.2f} deg  avg_err={m.avg_position_error:.3f} m")

"""Acceptance checks shared by the ``check`` command and the test suite.

Each ``criterion_N`` runs its experiment and returns a :class:`Criterion`
with the measured values; tolerances are the module-level constants.
"""

from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .control import AxisConstraints, mpc_axis_problem, mpc_model
from .harness import builtin, noise_scenario, run_scenario, write_csv
from .harness.report import count_violations
from .qp import QpSolver, qp_solve

STEP_RMS_MAX = 0.3
STEP_RUNTIME_MAX = 30.0
CIRCLE_CENTER_MAX = 0.1
CIRCLE_CONST_MAX = 0.5
PARASITIC_RATIO_MIN = 2.0
NOISE_SIGMAS = (0.0, 0.1, 1.0, 2.0)
NOISE_TILT_MAX_DEG = 15.0
JUMP_LIMIT = 2.05
WIND_FORCE = 1.0
WIND_BAND = 0.05
WIND_SETTLE_MAX = 15.0
MASS_STEP = 0.2
MASS_BAND = 0.01
MASS_SETTLE_MAX = 10.0
HOVER_OFFSET_MAX = 0.03
QP_INSTANCES = 200
QP_OBJ_TOL = 1e-6
QP_RES_TOL = 1e-8
QP_HORIZON = 40
QP_MEDIAN_MAX = 2e-3
GEOMETRY_TRIALS = 10_000
SWITCH_DEV_MAX = 0.05
FAILSAFE_SPEED_MAX = 2.0
FAILSAFE_TILT_MAX_DEG = 10.0
DETERMINISM_SCENARIOS = ("hover", "noise_sweep", "position_jump")


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        vals = ", ".join(f"{k}={_fmt(v)}" for k, v in self.values.items())
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}: {vals}"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _settle_time(t: np.ndarray, err: np.ndarray, band: float, t0: float) -> float:
    """Time after ``t0`` from which ``err`` stays within ``band`` (inf if never)."""
    after = t >= t0
    t, err = t[after], err[after]
    bad = np.nonzero(err > band)[0]
    if len(bad) == 0:
        return 0.0
    if bad[-1] + 1 >= len(t):
        return math.inf
    return float(t[bad[-1] + 1] - t0)


def _heading_error(log) -> float:
    fly = log["mode"] == "flying"
    d = np.angle(np.exp(1j * (log["heading"][fly] - log["ref_heading"][fly])))
    return float(np.abs(d).mean())


def _event_time(cfg, kind: str) -> float:
    return next(e.t for e in cfg.events if e.kind == kind)


# 1-3: tracking


def criterion_1() -> Criterion:
    cfg = builtin("step3d")
    r = run_scenario(cfg)
    log = r.log
    violations = count_violations(log, r.tracker_constraints)
    transit = np.linalg.norm(log.vec("ref_v"), axis=1) > 1e-3
    rms = float(np.sqrt(np.mean(log["pos_error"][transit] ** 2)))
    ok = violations == 0 and rms <= STEP_RMS_MAX and r.wall_time < STEP_RUNTIME_MAX
    return Criterion(1, "step3d tracking", ok, {"violations": violations, "transit_rms_m": rms,
                                                "runtime_s": r.wall_time})


def criterion_2() -> Criterion:
    r = run_scenario(builtin("circle_center_heading"))
    err = r.metrics.avg_position_error
    return Criterion(2, "circle, heading to center", err <= CIRCLE_CENTER_MAX, {"avg_error_m": err})


def criterion_3() -> Criterion:
    cfg = builtin("circle_const_heading")
    on = run_scenario(cfg)
    off = run_scenario(cfg.with_overrides({"parasitic": False}))
    h_on, h_off = _heading_error(on.log), _heading_error(off.log)
    ratio = h_off / max(h_on, 1e-12)
    err = on.metrics.avg_position_error
    ok = err <= CIRCLE_CONST_MAX and ratio >= PARASITIC_RATIO_MIN
    return Criterion(3, "circle, constant heading", ok, {"avg_error_m": err, "heading_err_on_rad": h_on,
                                                         "heading_err_off_rad": h_off, "ratio": ratio})


# 4-6: robustness


def criterion_4() -> Criterion:
    tilt = {}
    for ctl in ("se3", "mpc"):
        tilt[ctl] = [math.degrees(run_scenario(noise_scenario(s, ctl)).metrics.max_tilt) for s in NOISE_SIGMAS]
    ok = all(m < s for sig, m, s in zip(NOISE_SIGMAS, tilt["mpc"], tilt["se3"]) if sig >= 1.0)
    ok = ok and tilt["mpc"][NOISE_SIGMAS.index(2.0)] <= NOISE_TILT_MAX_DEG
    return Criterion(4, "noise suppression", ok, {"sigma": list(NOISE_SIGMAS), "se3_tilt_deg": tilt["se3"],
                                                  "mpc_tilt_deg": tilt["mpc"]})


def criterion_5() -> Criterion:
    cfg = builtin("position_jump")
    mpc = run_scenario(cfg).metrics
    se3 = run_scenario(cfg.with_overrides({"controller": "se3"})).metrics
    ok = (mpc.max_speed <= JUMP_LIMIT and mpc.max_acceleration <= JUMP_LIMIT
          and se3.max_speed > JUMP_LIMIT and se3.max_acceleration > JUMP_LIMIT)
    return Criterion(5, "position jump", ok, {"mpc_speed": mpc.max_speed, "mpc_acc": mpc.max_acceleration,
                                              "se3_speed": se3.max_speed, "se3_acc": se3.max_acceleration})


def criterion_6() -> Criterion:
    cfg = builtin("wind_step")
    log = run_scenario(cfg).log
    t_w = _event_time(cfg, "inject_wind")
    dw_err = np.linalg.norm(log.vec("d_w") - [WIND_FORCE, 0.0, 0.0], axis=1)
    wind_settle = _settle_time(log["t"], dw_err, WIND_BAND * WIND_FORCE, t_w)
    wind_offset = float(log["pos_error"][log["t"] >= t_w + WIND_SETTLE_MAX].max())

    cfg = builtin("mass_step")
    log = run_scenario(cfg).log
    t_m = _event_time(cfg, "add_mass")
    m_true = cfg.vehicle_params().m + MASS_STEP
    mass_settle = _settle_time(log["t"], np.abs(log["m_e"] - m_true), MASS_BAND, t_m)
    mass_offset = float(log["pos_error"][log["t"] >= t_m + MASS_SETTLE_MAX].max())
    ok = (wind_settle <= WIND_SETTLE_MAX and mass_settle <= MASS_SETTLE_MAX
          and max(wind_offset, mass_offset) <= HOVER_OFFSET_MAX)
    return Criterion(6, "disturbance and mass estimation", ok, {
        "wind_settle_s": wind_settle, "d_w_final_err": float(dw_err[-1]), "mass_settle_s": mass_settle,
        "m_e_final": float(log["m_e"][-1]), "hover_offset_m": max(wind_offset, mass_offset)})


# 7-8: kernels


def _random_qp(rng, n: int, m: int):
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3.0
    C = rng.normal(size=(m, n))
    c = C @ rng.normal(size=n)
    lo = c - rng.uniform(0.0, 1.0, m)
    hi = c + rng.uniform(0.0, 1.0, m)
    # some one-sided rows
    lo[rng.random(m) < 0.2] = -math.inf
    hi[rng.random(m) < 0.2] = math.inf
    return P, q, C, lo, hi


def brute_force_qp(P, q, C, lo, hi):
    """Exact optimum by enumerating every assignment of rows to {free, lower, upper}.

    Solves the equality-constrained KKT system of each face and keeps the best
    feasible point; exponential in the number of rows, so small instances only.
    """
    n, m = P.shape[0], C.shape[0]
    best_x, best_f = None, math.inf
    for assign in itertools.product((0, 1, 2), repeat=m):
        rows = [i for i, a in enumerate(assign) if a]
        if any((a == 1 and not math.isfinite(lo[i])) or (a == 2 and not math.isfinite(hi[i]))
               for i, a in enumerate(assign)):
            continue
        if len(rows) > n:
            continue
        A = C[rows]
        b = np.array([lo[i] if assign[i] == 1 else hi[i] for i in rows])
        K = np.block([[P, A.T], [A, np.zeros((len(rows), len(rows)))]])
        try:
            sol = np.linalg.solve(K, np.concatenate((-q, b)))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        Cx = C @ x
        if np.all(Cx >= lo - 1e-9) and np.all(Cx <= hi + 1e-9):
            f = float(0.5 * x @ P @ x + q @ x)
            if f < best_f:
                best_x, best_f = x, f
    return best_x, best_f


def qp_timing(instances: int = QP_INSTANCES, horizon: int = QP_HORIZON, seed: int = 1) -> np.ndarray:
    """Cold-start solve times [s] of random single-axis MPC problems."""
    rng = np.random.default_rng(seed)
    times = np.zeros(instances)
    for i in range(instances):
        lim = AxisConstraints(-rng.uniform(1, 9), rng.uniform(1, 9), rng.uniform(1, 12), rng.uniform(5, 50))
        x0 = [rng.uniform(-20, 20), rng.uniform(lim.v_min, lim.v_max), rng.uniform(-lim.a_max, lim.a_max)]
        p = mpc_axis_problem(0, x0, 0.0, lim, horizon=horizon)
        t0 = time.perf_counter()
        qp_solve(p)
        times[i] = time.perf_counter() - t0
    return times


def closed_loop_qp_timing(steps: int = 200, horizon: int = QP_HORIZON, seed: int = 2) -> np.ndarray:
    """Warm-started solve times [s] along point-mass closed-loop runs."""
    rng = np.random.default_rng(seed)
    A, B = mpc_model()
    lim = AxisConstraints(-2.0, 2.0, 2.0, 5.0)
    times = []
    while len(times) < steps:
        x = np.array([rng.uniform(-5, 5), rng.uniform(-1, 1), 0.0])
        sol = None
        for _ in range(50):
            p = mpc_axis_problem(0, x, 0.0, lim, horizon=horizon)
            t0 = time.perf_counter()
            sol = qp_solve(p, warm=sol, shift=True)
            times.append(time.perf_counter() - t0)
            x = A @ x + B * sol.u[0]
    return np.array(times[:steps])


def criterion_7() -> Criterion:
    rng = np.random.default_rng(7)
    gap = res = 0.0
    for _ in range(QP_INSTANCES):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, 7))
        P, q, C, lo, hi = _random_qp(rng, n, m)
        _, f_ref = brute_force_qp(P, q, C, lo, hi)
        out = QpSolver(P, C).solve(q, lo, hi)
        gap = max(gap, abs(out.objective - f_ref))
        res = max(res, out.prim_res)
    cold = float(np.median(qp_timing()))
    warm = float(np.median(closed_loop_qp_timing()))
    ok = gap <= QP_OBJ_TOL and res <= QP_RES_TOL and cold <= QP_MEDIAN_MAX
    return Criterion(7, "QP kernel", ok, {"max_obj_gap": gap, "max_residual": res, "median_ms_n40": cold * 1e3,
                                          "median_ms_n40_warm": warm * 1e3})


def _random_rotation(rng, max_tilt: float) -> np.ndarray:
    axis_angle = rng.uniform(0.0, 2.0 * math.pi)
    tilt = rng.uniform(0.0, max_tilt)
    axis = np.array([math.cos(axis_angle), math.sin(axis_angle), 0.0])
    return geo.rot_z(rng.uniform(-math.pi, math.pi)) @ geo.expm_so3(tilt * axis)


def geometry_trials(trials: int = GEOMETRY_TRIALS, seed: int = 8) -> dict:
    """Worst-case deviation of each geometry invariant over random trials."""
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(("apply_heading", "compliant_heading", "shared_b3", "fd_heading_rate",
                           "yaw_round_trip", "e_R_antisym", "e_R_zero_symmetric", "hat_cross"), 0.0)
    h = 1e-6
    for _ in range(trials):
        R = _random_rotation(rng, math.radians(60.0))
        dev = np.abs(geo.apply_heading(R, geo.heading_of(R)) - R).max()
        worst["apply_heading"] = max(worst["apply_heading"], dev)

        f = rng.normal(size=3)
        f[2] = abs(f[2]) + 0.5
        eta = rng.uniform(-math.pi, math.pi)
        Rc = geo.desired_orientation_heading_compliant(f, eta)
        Ro = geo.desired_orientation_original(f, eta)
        worst["compliant_heading"] = max(worst["compliant_heading"], abs(geo.angle_diff(geo.heading_of(Rc), eta)))
        worst["shared_b3"] = max(worst["shared_b3"], np.abs(Rc[:, 2] - Ro[:, 2]).max())

        w = rng.normal(size=3)
        w *= rng.uniform(0.0, 5.0) / max(np.linalg.norm(w), 1e-12)
        ahead, behind = geo.heading_of(R @ geo.expm_so3(h * w)), geo.heading_of(R @ geo.expm_so3(-h * w))
        fd = geo.angle_diff(ahead, behind) / (2 * h)
        worst["fd_heading_rate"] = max(worst["fd_heading_rate"], abs(fd - geo.heading_rate_from_body_rates(R, w)))

        rate = rng.uniform(-3.0, 3.0)
        yaw = geo.heading_rate_to_yaw_rate(R, rate)
        back = geo.heading_rate_from_body_rates(R, [0.0, 0.0, yaw])
        worst["yaw_round_trip"] = max(worst["yaw_round_trip"], abs(back - rate))

        R2 = _random_rotation(rng, math.pi)
        worst["e_R_antisym"] = max(worst["e_R_antisym"],
                                   np.abs(geo.rotation_error(R, R2) + geo.rotation_error(R2, R)).max())
        # R_d' R symmetric: identity or a half turn about a random axis
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        for D in (np.eye(3), geo.expm_so3(math.pi * axis)):
            worst["e_R_zero_symmetric"] = max(worst["e_R_zero_symmetric"],
                                              np.abs(geo.rotation_error(R, R @ D)).max())
        v = rng.normal(size=3)
        worst["hat_cross"] = max(worst["hat_cross"], np.abs(geo.hat(w) @ v - np.cross(w, v)).max())
    return worst


GEOMETRY_TOL = {"apply_heading": 1e-9, "compliant_heading": 1e-9, "shared_b3": 0.0, "fd_heading_rate": 1e-5,
                "yaw_round_trip": 1e-6, "e_R_antisym": 1e-12, "e_R_zero_symmetric": 1e-9, "hat_cross": 1e-12}


def criterion_8() -> Criterion:
    worst = geometry_trials()
    ok = all(worst[k] <= GEOMETRY_TOL[k] for k in worst)
    return Criterion(8, f"geometry properties ({GEOMETRY_TRIALS} trials)", ok, worst)


# 9-11: harness


def criterion_9() -> Criterion:
    cfg = builtin("estimator_switch")
    switched = run_scenario(cfg)
    control = run_scenario(cfg.with_overrides({"events": [e for e in cfg.to_dict()["events"]
                                                          if e["kind"] != "switch_estimator"]}))
    dev = float(np.linalg.norm(switched.log.vec("r") - control.log.vec("r"), axis=1).max())
    applied = len(switched.switches) > 0
    return Criterion(9, "estimator switch smoothness", applied and dev <= SWITCH_DEV_MAX,
                     {"switch_applied": applied, "max_deviation_m": dev})


def criterion_10() -> Criterion:
    r = run_scenario(builtin("failsafe_cut"))
    if not r.contacts:
        return Criterion(10, "failsafe descent", False, {"contact": False})
    _, v, tilt = r.contacts[0]
    speed = abs(float(v[2]))
    tilt = math.degrees(tilt)
    return Criterion(10, "failsafe descent", speed <= FAILSAFE_SPEED_MAX and tilt <= FAILSAFE_TILT_MAX_DEG,
                     {"contact_speed": speed, "contact_tilt_deg": tilt})


def criterion_11() -> Criterion:
    same = {}
    with tempfile.TemporaryDirectory() as tmp:
        for name in DETERMINISM_SCENARIOS:
            blobs = []
            for k in range(2):
                path = write_csv(run_scenario(builtin(name)).log, Path(tmp) / f"{name}_{k}.csv")
                blobs.append(path.read_bytes())
            same[name] = blobs[0] == blobs[1]
    return Criterion(11, "determinism", all(same.values()), same)


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 12)}


def run_all(numbers=None, echo=None) -> list[Criterion]:
    out = []
    for i in numbers or CRITERIA:
        c = CRITERIA[i]()
        if echo is not None:
            echo(c.line())
        out.append(c)
    return out

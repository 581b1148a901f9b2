"""Lock-step closed loop: 1 kHz truth, 100 Hz estimation, tracking and control.

Per control tick the order is fixed: advance the simulator ten steps, apply
scripted events, sample the measurement sources, predict/correct every
filter, let the arbiter pick the active hypothesis, run the tracker, the
feedback controller and the disturbance integrators, then convert the
desired force to the attitude-rate command that the simulator holds for the
next ten steps.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import geometry as geo
from ..attitude import (AttitudeGains, DisturbanceState, ForceCommand, apparent_mass, attitude_command,
                        disturbance_update, hover_thrust, unbiased_acceleration)
from ..config import ConstraintGroup
from ..control import (Estimate, FailsafeConfig, FailsafeController, MpcController, PositionGains,
                       Se3Controller, controller_handover)
from ..estimation import FrameTransform, NoReliableFilter, build_bank
from ..simulator import (AttitudeRateCommand, MeasurementConfig, MeasurementSource, NonFiniteState,
                         RigidBodyState, Simulator, force_to_thrust)
from ..tracking import (ControlReference, LandoffTracker, MpcTracker, SpeedCommand, SpeedTracker,
                        TrajectorySetpoint, VirtualUavState)
from .report import COLUMNS, RunLog, SummaryMetrics, summarize
from .scenario import ScenarioConfig, trajectory_from_event

TICK = 0.01
SIM_STEPS = 10

DISARMED = "disarmed"
TAKEOFF = "takeoff"
FLYING = "flying"
LANDING = "landing"
FAILSAFE = "failsafe"
LANDED = "landed"
AIRBORNE = (TAKEOFF, FLYING, LANDING)


class ScenarioDiverged(RuntimeError):
    pass


class TakeoffTimeout(RuntimeError):
    pass


class LandingTimeout(RuntimeError):
    pass


@dataclass
class RunResult:
    log: RunLog
    metrics: SummaryMetrics
    config: ScenarioConfig
    transitions: list = field(default_factory=list)
    switches: list = field(default_factory=list)
    contacts: list = field(default_factory=list)
    wall_time: float = 0.0
    tracker_constraints: ConstraintGroup | None = None
    qp_fallbacks: int = 0


class _Source:
    def __init__(self, cfg: MeasurementConfig):
        self.cfg = cfg
        self.sampler = MeasurementSource(cfg)
        self.enabled = True
        self.every = max(1, int(round(1.0 / (cfg.rate * TICK))))

    @property
    def rot(self) -> np.ndarray:
        return geo.rot_z(self.cfg.frame_heading)


class FlightStack:
    """One vehicle with its estimator bank, trackers, controllers and mission logic."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.params = cfg.vehicle_params()
        self.cgroups = cfg.constraint_group_map()
        self.ggroups = cfg.gain_group_map()
        p0 = np.asarray(cfg.position, dtype=float).copy()
        if cfg.start == "ground":
            p0[2] = 0.0
        state = RigidBodyState(r=p0, R=geo.rot_z(cfg.heading))
        self.sim = Simulator(self.params, state, floor=True)
        self.sim.pinned = cfg.pinned
        self.sim.wind = np.asarray(cfg.wind, dtype=float).copy()

        self.sources: dict[str, _Source] = {}
        for i, (name, kw) in enumerate(cfg.sources.items()):
            kw = dict(kw)
            kw.setdefault("seed", cfg.seed * 1009 + i)
            self.sources[name] = _Source(MeasurementConfig(**kw))
        est_cfg = cfg.estimator_config()
        frames = {n: (s.cfg.frame_offset, s.cfg.frame_heading) for n, s in self.sources.items()}
        self.bank = build_bank(est_cfg, p0, cfg.heading, frames, auto_select=False)
        self.request = None

        self.ds = DisturbanceState(self.params.m, g=self.params.g)
        self._set_gains(cfg.gains)
        self.tracker_group = self.cgroups[cfg.constraints]
        self.controller_group = self.cgroups[cfg.controller_constraints]
        self.mpc_tracker = MpcTracker(self.tracker_group)
        self.landoff = LandoffTracker(cfg.admittance_radius)
        self.speed_tracker = SpeedTracker(cfg.speed_cutoff_hz)
        self.speed_cmd: SpeedCommand | None = None
        self.tracker = cfg.tracker
        self.controllers = {
            "se3": Se3Controller(self.pos_gains, math.radians(cfg.max_tilt_deg)),
            "mpc": MpcController(self.controller_group),
        }
        self.controller_name = cfg.controller
        self.failsafe = FailsafeController(self.params, FailsafeConfig(k_fs=cfg.k_fs, k_R=self.att_gains.k_R))
        self._apply_tracker_constraints()

        self.k = 0
        self.t = 0.0
        self.a_d = np.zeros(3)
        self.last_fc: ForceCommand | None = None
        self.chi = ControlReference(p0.copy(), heading=cfg.heading)
        self.setpoint = TrajectorySetpoint.point(p0, cfg.heading)
        self.mpc_tracker.reset(p0, cfg.heading)
        self.events = list(cfg.events)
        self.transitions: list[tuple[float, str, str]] = []
        self.touchdown_timer = 0.0
        self.mode_t0 = 0.0
        if cfg.start == "air":
            self.mode = FLYING
            self.sim.cmd = AttitudeRateCommand(np.zeros(3), hover_thrust(self.ds.m_e, self.params))
        else:
            self.mode = DISARMED
            self.sim.cmd = AttitudeRateCommand(np.zeros(3), 0.0)
        self.rows: list = []

    # configuration helpers

    def _set_gains(self, name: str) -> None:
        g = self.ggroups[name]
        self.att_gains = AttitudeGains(g.k_R, g.k_iw, g.k_ib)
        if not hasattr(self, "pos_gains"):
            self.pos_gains = PositionGains(g.k_p, g.k_v)
        else:
            self.pos_gains.k_p = g.k_p.copy()
            self.pos_gains.k_v = g.k_v.copy()

    def _integrator_gains(self) -> AttitudeGains:
        if self.controller_name != "mpc":
            return self.att_gains
        k = self.cfg.mpc_integral_scale
        g = self.att_gains
        return AttitudeGains(g.k_R, k * g.k_iw, k * g.k_ib)

    def _apply_tracker_constraints(self) -> None:
        cg = self.tracker_group
        if self.controller_name == "mpc":
            # the tracker may use at most half of the controller's limits
            cg = cg.capped(self.controller_group.scaled(0.5))
        self.mpc_tracker.set_constraints(cg)
        self.speed_tracker.max_acceleration = cg.horizontal_acceleration

    @property
    def controller(self):
        return self.controllers[self.controller_name]

    def _set_mode(self, mode: str) -> None:
        if mode != self.mode:
            self.transitions.append((self.t, self.mode, mode))
            self.mode = mode
            self.mode_t0 = self.t

    # estimation

    def _estimate(self) -> tuple[Estimate, np.ndarray]:
        h = self.bank.hypothesis
        src = self.sources[self.bank.current.source]
        R_frame = src.rot @ self.sim.state.R
        try:
            R_est = geo.apply_heading(R_frame, h.heading)
        except geo.HeadingUndefined:
            R_est = R_frame
        return Estimate(h.position, h.velocity, h.acceleration, h.heading), R_est

    def _run_estimators(self) -> None:
        st = self.sim.state
        active_rot = self.sources[self.bank.current.source].rot
        a_world = active_rot.T @ self.a_d
        meas = {}
        for name, src in self.sources.items():
            if src.enabled and self.k % src.every == 0:
                meas[name] = src.sampler.measure(st, self.t)
        for f in self.bank.filters:
            src = self.sources[f.source]
            f.predict(src.rot @ a_world)
            m = meas.get(f.source)
            if m is not None:
                try:
                    hdg = geo.wrap_angle(geo.heading_of(st.R) + src.cfg.frame_heading)
                except geo.HeadingUndefined:
                    hdg = None
                f.correct(m.position, m.velocity, hdg)
            f.fuse_gyro(src.rot @ st.R, st.omega)
            f.update_reliability(f.h.t)

    def _arbitrate(self) -> bool:
        """Select the active filter; returns False when no filter is reliable."""
        try:
            _, event = self.bank.arbiter_select(self.request)
        except NoReliableFilter:
            return False
        self.request = None
        if event is not None:
            self._apply_switch(event.transform)
        return True

    def _apply_switch(self, tf: FrameTransform) -> None:
        """Re-express everything frame-dependent in the new hypothesis frame."""
        self.mpc_tracker.transform(tf)
        self.speed_tracker.chi = self.speed_tracker.chi.transformed(tf)
        lo = self.landoff
        p = tf.apply_point(np.array([lo.xy[0], lo.xy[1], lo.z]))
        lo.xy, lo.z, lo.heading = p[:2], float(p[2]), tf.apply_heading(lo.heading)
        self.setpoint = TrajectorySetpoint(np.array([tf.apply_point(q) for q in self.setpoint.positions]),
                                           np.array([tf.apply_heading(h) for h in self.setpoint.headings]),
                                           self.setpoint.period, self.setpoint.t0)
        if self.speed_cmd is not None:
            v = tf.apply_vector(np.array([*self.speed_cmd.velocity, 0.0]))
            self.speed_cmd = SpeedCommand(v[:2], self.speed_cmd.height + float(tf.translation[2]),
                                          tf.apply_heading(self.speed_cmd.heading))
        self.chi = self.chi.transformed(tf)
        self.ds = self.ds.transformed(tf)
        self.a_d = tf.apply_vector(self.a_d)
        if self.last_fc is not None:
            self.last_fc.f_d = tf.apply_vector(self.last_fc.f_d)
        for c in self.controllers.values():
            c.offset = tf.apply_vector(c.offset)
        self.controllers["mpc"].reset_warm_start()

    # events

    def _apply_events(self, est: Estimate) -> None:
        while self.events and self.events[0].t <= self.t + 1e-9:
            e = self.events.pop(0)
            a = e.args
            tf = self._frame_tf()
            if e.kind == "setpoint":
                pos = tf.apply_point(np.asarray(a["position"], dtype=float))
                self.setpoint = TrajectorySetpoint.point(pos, tf.apply_heading(float(a.get("heading", 0.0))))
            elif e.kind == "trajectory":
                traj = trajectory_from_event(a, self.t)
                self.setpoint = TrajectorySetpoint(np.array([tf.apply_point(q) for q in traj.positions]),
                                                   np.array([tf.apply_heading(h) for h in traj.headings]),
                                                   traj.period, traj.t0)
            elif e.kind == "speed":
                self.speed_cmd = SpeedCommand(a.get("velocity", [0.0, 0.0]), float(a.get("height", est.position[2])),
                                              float(a.get("heading", est.heading)))
            elif e.kind == "switch_tracker":
                self._switch_tracker(a["tracker"], est)
            elif e.kind == "switch_controller":
                self._switch_controller(a["controller"], est)
            elif e.kind == "switch_estimator":
                self.request = a["filter"]
            elif e.kind == "inject_wind":
                self.sim.wind = np.asarray(a.get("force", [0.0, 0.0, 0.0]), dtype=float)
            elif e.kind == "inject_jump":
                src = self.sources[a.get("source", next(iter(self.sources)))]
                src.cfg.jumps.append((self.t, np.asarray(a["offset"], dtype=float)))
            elif e.kind == "inject_noise":
                src = self.sources[a.get("source", next(iter(self.sources)))]
                src.cfg.sigma_pos = float(a.get("sigma_pos", src.cfg.sigma_pos))
                src.cfg.sigma_vel = float(a.get("sigma_vel", src.cfg.sigma_vel))
            elif e.kind in ("cut_localization", "restore_localization"):
                names = a.get("sources", list(self.sources))
                for n in names:
                    self.sources[n].enabled = e.kind == "restore_localization"
            elif e.kind == "add_mass":
                self.sim.extra_mass += float(a.get("mass", 0.0))
            elif e.kind == "takeoff":
                if self.mode == DISARMED:
                    h = float(a.get("height", self.cfg.takeoff_height))
                    self.landoff.start_takeoff(est.position, est.heading, est.position[2] + h)
                    self._set_mode(TAKEOFF)
            elif e.kind == "land":
                if self.mode == FLYING:
                    self.landoff.start_landing(est.position, est.heading)
                    self._set_mode(LANDING)
            elif e.kind == "set_constraints":
                self.tracker_group = self.cgroups[a["group"]]
                self._apply_tracker_constraints()
            elif e.kind == "set_gains":
                self._set_gains(a["group"])
            elif e.kind == "pin":
                self.sim.pinned = bool(a.get("value", True))

    def _frame_tf(self) -> FrameTransform:
        """Transform from the truth frame to the frame of the active hypothesis."""
        src = self.sources[self.bank.current.source]
        return FrameTransform(src.cfg.frame_offset.copy(), src.cfg.frame_heading)

    def _switch_tracker(self, name: str, est: Estimate) -> None:
        if name == self.tracker:
            return
        if name == "speed":
            self.speed_tracker.reset(self.chi)
            if self.speed_cmd is None:
                self.speed_cmd = SpeedCommand(self.chi.velocity[:2], self.chi.position[2], self.chi.heading)
        elif name == "mpc":
            self.mpc_tracker.reset_to(self.chi)
            self.setpoint = TrajectorySetpoint.point(self.chi.position, self.chi.heading)
        self.tracker = name

    def _switch_controller(self, name: str, est: Estimate) -> None:
        if name == self.controller_name:
            return
        self.controller_name = name
        controller_handover(self.last_fc, self.controller, self.chi, est, self.ds)
        self._apply_tracker_constraints()

    # main loop

    def _reference(self, est: Estimate) -> ControlReference:
        if self.mode in (TAKEOFF, LANDING):
            chi = self.landoff.step(est.position)
            if self.mode == TAKEOFF and self.landoff.takeoff_complete:
                self._set_mode(FLYING)
                self.mpc_tracker.state = VirtualUavState.from_reference(chi)
                self.mpc_tracker.reset_to(chi)
                self.setpoint = TrajectorySetpoint.point(chi.position, chi.heading)
                self.speed_tracker.reset(chi)
            return chi
        if self.tracker == "speed":
            if self.speed_cmd is None:
                self.speed_cmd = SpeedCommand(np.zeros(2), est.position[2], est.heading)
            return self.speed_tracker.step(self.speed_cmd)
        return self.mpc_tracker.step(self.setpoint, self.t)

    def tick(self) -> None:
        self.k += 1
        self.t = round(self.k * TICK, 9)
        try:
            self.sim.advance(SIM_STEPS)
        except NonFiniteState as exc:
            raise ScenarioDiverged(f"t={self.t}: {exc}") from None
        st = self.sim.state
        if not np.isfinite(st.r).all() or np.abs(st.r).max() > 1e4:
            raise ScenarioDiverged(f"t={self.t}: position {st.r}")

        self._run_estimators()
        est, R_est = self._estimate()
        self._apply_events(est)
        if self.mode in AIRBORNE and not self._arbitrate():
            self.failsafe.activate(self.t, self.ds)
            self._set_mode(FAILSAFE)
        est, R_est = self._estimate()

        cmd = AttitudeRateCommand(np.zeros(3), 0.0)
        if self.mode in AIRBORNE:
            cmd = self._control(est, R_est)
        elif self.mode == FAILSAFE:
            cmd = self.failsafe.command(self.t, st.R)
            self.a_d = np.zeros(3)
            if self.sim.on_ground:
                self._set_mode(LANDED)
                cmd = AttitudeRateCommand(np.zeros(3), 0.0)
        self.sim.cmd = cmd
        self._check_timeouts()
        self._log(est, cmd)

    def _control(self, est: Estimate, R_est: np.ndarray) -> AttitudeRateCommand:
        self.chi = self._reference(est)
        chi = self.chi
        fc = self.controller.update(chi, est, self.ds, TICK)
        self.last_fc = fc
        try:
            cmd = attitude_command(fc, R_est, self.ds.m_e, self.att_gains, self.params,
                                   self.cfg.construction, self.cfg.parasitic)
        except (geo.DegenerateForce, geo.HeadingUndefined, geo.ParallelHeading):
            cmd = AttitudeRateCommand(np.zeros(3), self.sim.cmd.thrust)
        f_thrust = float(fc.f_d @ R_est[:, 2])
        _, saturated = force_to_thrust(max(f_thrust, 0.0), self.params)
        grounded = self.sim.on_ground
        e_p = np.where(chi.mask, est.position - chi.position, 0.0)
        e_v = est.velocity - chi.velocity
        # integrate only near the equilibrium of the error dynamics (anti-windup)
        near = np.linalg.norm(e_p) < self.cfg.integrate_max_error and np.linalg.norm(e_v) < self.cfg.integrate_max_speed_error
        if near and not (self.mode == TAKEOFF or saturated or grounded or self.controller.saturated):
            self.ds = disturbance_update(self.ds, e_p, est.heading, TICK, self._integrator_gains(), mask=chi.mask,
                                         freeze_mass=self.mode == LANDING)
        self.a_d = unbiased_acceleration(fc.f_d, R_est, self.ds)
        if self.mode == LANDING:
            # touchdown: the thrust no longer carries the vehicle
            if apparent_mass(cmd.thrust, self.params) < 0.5 * self.ds.m_e:
                self.touchdown_timer += TICK
            else:
                self.touchdown_timer = 0.0
            if self.touchdown_timer >= 0.3 - 1e-9:
                self._set_mode(LANDED)
                cmd = AttitudeRateCommand(np.zeros(3), 0.0)
        return cmd

    def _check_timeouts(self) -> None:
        dt = self.t - self.mode_t0
        if self.mode == TAKEOFF and dt > self.cfg.takeoff_timeout:
            raise TakeoffTimeout(f"takeoff not complete after {dt:.1f} s")
        if self.mode == LANDING and dt > self.cfg.landing_timeout:
            raise LandingTimeout(f"no touchdown after {dt:.1f} s")

    def _log(self, est: Estimate, cmd: AttitudeRateCommand) -> None:
        st = self.sim.state
        try:
            hdg = geo.heading_of(st.R)
        except geo.HeadingUndefined:
            hdg = math.nan
        chi = self.chi
        fd = self.last_fc.f_d if (self.last_fc is not None and self.mode in AIRBORNE) else np.zeros(3)
        # truth in the active frame against the reference, on the controlled axes
        tf = self._frame_tf()
        err = np.where(chi.mask, tf.apply_point(st.r) - chi.position, 0.0)
        d_b = self.ds.d_b
        self.rows.append([
            self.t, *st.r, *st.v, hdg, geo.tilt_angle(st.R),
            *est.position, *est.velocity, est.heading,
            *chi.position, *chi.velocity, *chi.acceleration, *chi.jerk, chi.heading, chi.heading_rate,
            *fd, *cmd.omega_d, cmd.thrust,
            *self.ds.d_w, *d_b, self.ds.m_e, float(np.linalg.norm(err)),
            self.bank.current.name, self.controller_name, self.mode,
        ])

    def run(self) -> RunLog:
        n = int(round(self.cfg.duration / TICK))
        for _ in range(n):
            self.tick()
        log = RunLog.from_rows(self.rows, self.transitions, self.cfg.name)
        assert len(COLUMNS) == len(self.rows[0])
        return log


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    """Run ``cfg`` to completion; deterministic for a fixed config and seed."""
    t0 = time.perf_counter()
    stack = FlightStack(cfg)
    log = stack.run()
    cg = stack.mpc_tracker.constraints
    metrics = summarize(log, cg)
    fallbacks = stack.controllers["mpc"].fallbacks + stack.mpc_tracker.fallbacks
    return RunResult(log, metrics, cfg, stack.transitions, list(stack.bank.events), list(stack.sim.contacts),
                     time.perf_counter() - t0, cg, fallbacks)

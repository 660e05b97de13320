"""One complete run: fleet, runtime, workload, manager and rescale coordinator."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .elasticity import (DaemonRegistry, PhaseTimings, RescaleRequest, Rescaler, chare_loads,
                         pe_rates)
from .fleet import CloudManager, FaultPlan, Fleet
from .loadbalance import LBInput, greedy_refine
from .machine import Calibration, CheckpointMode, ConfigError, load_calibration
from .metrics import iteration_intervals, summarize
from .runtime import Runtime, RuntimeFault
from .simkernel import Engine
from .workload import (StencilConfig, SyntheticConfig, assemble, init_blocks,
                       init_synthetic)

log = logging.getLogger(__name__)

MODES = ("A", "B", "C")


@dataclass
class RunConfig:
    """Everything needed for one deterministic run.

    ``workload`` is a :class:`StencilConfig` or a :class:`SyntheticConfig`;
    ``fleet`` lists ``(profile_name, instance_count)`` groups. For the
    synthetic workload ``chares_per_pe`` sets the chare count.
    """
    workload: object
    fleet: list
    network: str = "tcp"
    timing: str = "cpu"
    mode: str = "C"
    checkpoint_mode: Optional[CheckpointMode] = None
    lb: bool = False
    lb_period: Optional[int] = None
    t_timeout: Optional[float] = None
    launch_delay: Optional[float] = None
    fault_plan: FaultPlan = field(default_factory=FaultPlan)
    chares_per_pe: int = 1
    seed: int = 0
    trace: bool = False
    strict_grace: bool = True
    max_time: float = 1e7

    def resolved_checkpoint_mode(self, cal: Calibration) -> CheckpointMode:
        if self.checkpoint_mode is not None:
            return self.checkpoint_mode
        if self.mode == "A":
            return CheckpointMode.SHARED_FS
        gpu = all(cal.profile(p).has_device for p, _ in self.fleet)
        return CheckpointMode.DAEMON if gpu else CheckpointMode.IN_MEMORY


@dataclass
class RescaleRecord:
    kind: str
    request: RescaleRequest
    timings: PhaseTimings
    start: float
    end: float


@dataclass
class RunResult:
    config: RunConfig
    e2e_runtime: float
    iteration_done_at: dict
    windows: list              # (start, end, what)
    rescales: list
    lb_count: int
    trace_digest: str
    trace: list
    grid: Optional[np.ndarray]
    manager: CloudManager
    restart_events: int
    daemon_up_events: int

    @property
    def rescale_total(self) -> float:
        return sum(r.timings.total for r in self.rescales)

    def time_per_iter(self, warmup: int = 5) -> float:
        return summarize(iteration_intervals(self.iteration_done_at),
                         [(a, b) for a, b, _ in self.windows], warmup)


class _Profiles:
    """Instance id -> InstanceProfile, following the live fleet."""

    def __init__(self, fleet: Fleet, cal: Calibration):
        self.fleet = fleet
        self.cal = cal

    def __getitem__(self, inst_id):
        return self.cal.profile(self.fleet.instances[inst_id].profile)


class Coordinator:
    """Owns the application barrier: rescales first, then load balancing.

    Requests are built lazily once the coordinator is free, so at most one
    rescale is ever pending and none overlap.
    """

    def __init__(self, sim: "Simulation"):
        self.sim = sim
        self.queue: list = []
        self.lb_due = False
        self.busy = False
        self.window_start = 0.0
        self.manager: Optional[CloudManager] = None

    def submit(self, build) -> None:
        self.queue.append(build)
        self._kick()

    def request_lb(self) -> None:
        self.lb_due = True
        self._kick()

    def _kick(self) -> None:
        sim = self.sim
        if self.busy or sim.finished or not (self.queue or self.lb_due):
            return
        self.busy = True
        self.window_start = sim.engine.now
        sim.rt.pause(self._at_barrier)

    def _at_barrier(self) -> None:
        sim = self.sim
        if sim.finished:
            return
        while self.queue:
            build = self.queue.pop(0)
            req = build()
            if req is not None:
                sim.start_rescale(req, self._rescale_done)
                return
        if self.lb_due and sim.cfg.mode != "A":
            self.lb_due = False
            sim.start_lb(self._lb_done)
            return
        self.lb_due = False
        self._release()

    def _rescale_done(self, req) -> None:
        self.manager.rescale_finished(req)
        if req.add and self.sim.checkpoint_mode is not CheckpointMode.SHARED_FS:
            # the rescale already rebalanced onto the new set
            self.lb_due = False
        self._at_barrier()

    def _lb_done(self) -> None:
        self._at_barrier()

    def _release(self) -> None:
        sim = self.sim
        self.busy = False
        sim.windows.append((self.window_start, sim.engine.now, "barrier"))
        sim.rt.resume()
        # something may have been requested while we were finishing up
        if self.queue or self.lb_due:
            self._kick()


class Simulation:
    def __init__(self, cfg: RunConfig, calibration: Optional[Calibration] = None):
        if cfg.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, not {cfg.mode!r}")
        self.cfg = cfg
        self.cal = calibration or load_calibration()
        cal = self.cal
        rtd = cal.runtime
        self.engine = Engine(cfg.seed, record_trace=True)
        self.net = cal.network(cfg.network)
        self.timing = cal.timing(cfg.timing)
        self.checkpoint_mode = cfg.resolved_checkpoint_mode(cal)
        self.lb_period = cfg.lb_period or int(rtd["lb_period"])
        self.finished = False
        self.e2e: Optional[float] = None
        self.windows: list = []
        self.rescales: list[RescaleRecord] = []
        self.lb_count = 0

        self.fleet = Fleet()
        for name, count in cfg.fleet:
            cal.profile(name)
            self.fleet.bootstrap(name, count)
        if self.checkpoint_mode is CheckpointMode.DAEMON:
            for name, _ in cfg.fleet:
                if not cal.profile(name).has_device:
                    raise ConfigError(f"checkpoint mode {self.checkpoint_mode.value} needs "
                                      f"device-bearing instances; {name!r} has none")
        w = cfg.workload
        self.rt = Runtime(self.engine, self.net, self.timing, w.iterations,
                          rtd["task_overhead"], rtd["message_overhead"])
        for inst in sorted(self.fleet.instances.values(), key=lambda i: i.id):
            self.rt.add_instance(inst.id, cal.profile(inst.profile))
        pe_count = len(self.rt.pes)
        device = all(cal.profile(p).has_device for p, _ in cfg.fleet)
        if isinstance(w, StencilConfig):
            self.chares, where = init_blocks(w, pe_count, device_resident=device)
        elif isinstance(w, SyntheticConfig):
            self.chares, where = init_synthetic(w, pe_count, device_resident=device)
        else:
            raise ConfigError(f"unknown workload {type(w).__name__}")
        pe_ids = sorted(self.rt.pes)
        for c in self.chares:
            self.rt.add_chare(c, pe_ids[where[c.cid]])

        self.daemons = DaemonRegistry()
        self.profiles = _Profiles(self.fleet, cal)
        if self.checkpoint_mode is CheckpointMode.DAEMON:
            for i in sorted(self.rt.instances):
                self.daemons.launch(i, self.rt.instances[i], 0.0)
        self.coordinator = Coordinator(self)
        fleet_profile = cfg.fleet[0][0]
        self.manager = CloudManager(
            self.engine, self.fleet, cfg.mode, self.coordinator, self.checkpoint_mode,
            fleet_profile,
            t_timeout=cfg.t_timeout if cfg.t_timeout is not None else rtd["t_timeout"],
            t_grace=self.timing.t_grace,
            launch_delay=cfg.launch_delay if cfg.launch_delay is not None else rtd["launch_delay"],
            strict_grace=cfg.strict_grace)
        self.coordinator.manager = self.manager
        self.rescaler = Rescaler(self.rt, self.timing, self.daemons, self.profiles,
                                 on_evacuated=self.manager.on_evacuated,
                                 on_released=self.manager.on_released)
        self.rt.on_iteration_done = self._iteration_done
        self.rt.on_complete = self._complete

    # ------------------------------------------------------------------ hooks

    def _iteration_done(self, it: int, t: float) -> None:
        done = it + 1
        if self.cfg.lb and done % self.lb_period == 0 and done < self.cfg.workload.iterations:
            self.coordinator.request_lb()

    def _complete(self, t: float) -> None:
        if self.finished:
            return
        self.finished = True
        self.e2e = t
        self.engine.stop()

    # ------------------------------------------------------------- rescales

    def start_rescale(self, req: RescaleRequest, on_done) -> None:
        timings = PhaseTimings()
        gen = self.rescaler.steps(req, timings)
        start = self.engine.now

        def advance():
            try:
                tag, dt = next(gen)
            except StopIteration:
                self.rescales.append(RescaleRecord(req.kind, req, timings, start, self.engine.now))
                on_done(req)
                return
            self.engine.schedule_in(dt, tag, advance)

        advance()

    def start_lb(self, on_done) -> None:
        rt = self.rt
        plan = greedy_refine(LBInput(chare_loads(rt), {c: rt.pe_of(c) for c in rt.chares},
                                     pe_rates(rt)))
        d = rt.migrate_batch([(cid, dst) for cid, _, dst in plan.moves])
        self.lb_count += 1

        def done():
            rt.reset_stats()
            on_done()

        self.engine.schedule_in(d, "workload-step:load-balance", done)

    # ------------------------------------------------------------------ run

    def run(self) -> RunResult:
        self.manager.start(self.cfg.fault_plan)
        self.rt.start()
        self.engine.run(until=self.cfg.max_time)
        if not self.finished:
            raise RuntimeFault(f"workload did not complete by t={self.engine.now}")
        grid = None
        w = self.cfg.workload
        if isinstance(w, StencilConfig):
            grid = assemble(self.chares, w.grid_n)
        trace = self.engine.trace_lines()
        restarts = sum(1 for line in trace if line.endswith("\trescale-phase-done:restart"))
        daemon_ups = sum(1 for line in trace if "\tdaemon-up" in line)
        return RunResult(self.cfg, self.e2e, dict(self.rt.iteration_done_at), list(self.windows),
                         list(self.rescales), self.lb_count, self.engine.trace_digest(),
                         trace if self.cfg.trace else [], grid, self.manager, restarts,
                         daemon_ups)


def run(cfg: RunConfig, calibration: Optional[Calibration] = None) -> RunResult:
    return Simulation(cfg, calibration).run()

"""The five preset experiments and the harness that runs them.

Each preset expands into a list of labelled runs; labels look like
``e2e-rebalance/cpu/mode=B/interrupts=8`` and become the ``scenario`` column
of ``metrics.csv``.
"""
from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .fleet import FaultPlan, interruption_plan
from .loadbalance import LBInput, brute_force_makespan, greedy_refine, predicted_makespan
from .machine import Calibration, ConfigError, load_calibration, merge_calibration
from .metrics import Recorder
from .simulation import RunConfig, RunResult, run
from .workload import StencilConfig, SyntheticConfig

# instance profile and timing model per device class
DEVICES = {"cpu": ("cpu-c6gn", "cpu"), "gpu": ("gpu-t4", "gpu")}

PRESETS: dict[str, dict] = {
    "od-scaling": {
        "pes": 16, "od": [1, 4, 8], "grid_n": 512, "iterations": 30,
        "profile": "cpu-bench", "network": "latency-dominant", "timing": "cpu",
    },
    "hetero-lb": {
        "fleet": [["cpu-fast", 4], ["cpu-slow", 4]], "workloads": ["synthetic", "jacobi"],
        "chares": 64, "work_per_iter": 3e5, "comm_bytes": 8192, "grid_n": 256, "od": [8],
        "iterations": 60, "lb_period": 10, "network": "tcp", "lb_cases": 200,
    },
    "interruption-overhead": {
        "instances": [2, 4, 8, 16], "devices": ["cpu", "gpu"], "chares": 64,
        "work_per_iter": 1e5, "comm_bytes": 8192, "state_bytes": 262144, "iterations": 400,
        "recommend_at": 10.0, "notice_after": 90.0, "modes": ["C"], "network": "tcp",
    },
    "mode-compare": {
        "instances": 8, "devices": ["cpu"], "modes": ["A", "B", "C"], "chares_per_pe": 2,
        "work_per_iter": 3e5, "comm_bytes": 8192, "state_bytes": 65536, "iterations": 500,
        "recommend_at": 60.0, "notice_after": 90.0, "interrupted": [3], "network": "tcp",
    },
    "e2e-rebalance": {
        "instances": 16, "interrupts": [0, 4, 8], "devices": ["cpu", "gpu"], "modes": ["B", "C"],
        "chares_per_pe": 2, "work_per_iter": 3e5, "comm_bytes": 8192, "state_bytes": 65536,
        "iterations": 1000, "recommend_at": 200.0, "notice_after": 90.0, "lb_period": 50,
        "network": "tcp",
    },
}


@dataclass
class Scenario:
    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    t_timeout: Optional[float] = None
    calibration: dict = field(default_factory=dict)
    custom: Optional[RunConfig] = None

    def resolved_params(self) -> dict:
        if self.name == "custom":
            return {}
        if self.name not in PRESETS:
            raise ConfigError(f"scenario: unknown preset {self.name!r}; "
                              f"choose from {sorted(PRESETS)}")
        out = copy.deepcopy(PRESETS[self.name])
        for key, value in self.params.items():
            if key not in out:
                raise ConfigError(f"params.{key}: not a parameter of {self.name}")
            out[key] = value
        return out

    def calibration_for(self, base: Optional[Calibration] = None) -> Calibration:
        cal = base or load_calibration()
        return merge_calibration(cal, self.calibration) if self.calibration else cal


@dataclass
class PlannedRun:
    label: str
    config: RunConfig
    info: dict = field(default_factory=dict)


def _listify(v) -> list:
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _spread(n_pick: int, n_total: int) -> list[int]:
    """``n_pick`` instance indices spread evenly over ``0..n_total-1``."""
    return [k * n_total // n_pick for k in range(n_pick)]


def _synthetic_fleet(p: dict, dev: str, instances: int, cal: Calibration, chares=None):
    profile, timing = DEVICES[dev]
    per = cal.profile(profile).pes_per_instance
    n = chares if chares is not None else instances * per * p["chares_per_pe"]
    w = SyntheticConfig(n, p["work_per_iter"], p["comm_bytes"], p["iterations"],
                        p["state_bytes"])
    return w, [(profile, instances)], timing


def plan_runs(s: Scenario, cal: Calibration) -> list[PlannedRun]:
    if s.name == "custom":
        if s.custom is None:
            raise ConfigError("custom scenario needs a workload and a fleet")
        return [PlannedRun("custom", s.custom)]
    p = s.resolved_params()
    common = dict(seed=s.seed, t_timeout=s.t_timeout)
    runs: list[PlannedRun] = []
    if s.name == "od-scaling":
        for od in _listify(p["od"]):
            w = StencilConfig(p["grid_n"], int(od), p["iterations"])
            cfg = RunConfig(w, [(p["profile"], p["pes"])], network=p["network"],
                            timing=p["timing"], **common)
            runs.append(PlannedRun(f"od-scaling/od={od}", cfg, {"od": od}))
    elif s.name == "hetero-lb":
        fleet = [(name, int(n)) for name, n in p["fleet"]]
        for wl in _listify(p["workloads"]):
            if wl == "synthetic":
                w = SyntheticConfig(p["chares"], p["work_per_iter"], p["comm_bytes"],
                                    p["iterations"])
                variants = [("synthetic", w)]
            elif wl == "jacobi":
                variants = [(f"jacobi/od={od}", StencilConfig(p["grid_n"], int(od), p["iterations"]))
                            for od in _listify(p["od"])]
            else:
                raise ConfigError(f"params.workloads: unknown workload {wl!r}")
            for name, w in variants:
                for lb in (False, True):
                    cfg = RunConfig(w, fleet, network=p["network"], lb=lb,
                                    lb_period=p["lb_period"], **common)
                    runs.append(PlannedRun(f"hetero-lb/{name}/lb={'on' if lb else 'off'}", cfg,
                                           {"workload": name, "lb": lb}))
    elif s.name == "interruption-overhead":
        for dev in _listify(p["devices"]):
            for n in _listify(p["instances"]):
                for mode in _listify(p["modes"]):
                    w, fleet, timing = _synthetic_fleet(p, dev, int(n), cal, chares=p["chares"])
                    plan = interruption_plan([0], p["recommend_at"], p["notice_after"])
                    cfg = RunConfig(w, fleet, network=p["network"], timing=timing, mode=mode,
                                    lb=False, fault_plan=plan, **common)
                    runs.append(PlannedRun(
                        f"interruption-overhead/{dev}/mode={mode}/instances={n}", cfg,
                        {"device": dev, "instances": n, "mode": mode}))
    elif s.name == "mode-compare":
        for dev in _listify(p["devices"]):
            for mode in _listify(p["modes"]):
                w, fleet, timing = _synthetic_fleet(p, dev, int(p["instances"]), cal)
                plan = interruption_plan(p["interrupted"], p["recommend_at"], p["notice_after"])
                cfg = RunConfig(w, fleet, network=p["network"], timing=timing, mode=mode,
                                lb=False, fault_plan=plan, **common)
                runs.append(PlannedRun(f"mode-compare/{dev}/mode={mode}", cfg,
                                       {"device": dev, "mode": mode}))
    elif s.name == "e2e-rebalance":
        n_inst = int(p["instances"])
        for dev in _listify(p["devices"]):
            w, fleet, timing = _synthetic_fleet(p, dev, n_inst, cal)
            base = RunConfig(w, fleet, network=p["network"], timing=timing, mode="C", lb=True,
                             lb_period=p["lb_period"], **common)
            runs.append(PlannedRun(f"e2e-rebalance/{dev}/baseline", base,
                                   {"device": dev, "baseline": True}))
            for mode in _listify(p["modes"]):
                for k in _listify(p["interrupts"]):
                    k = int(k)
                    if k > n_inst:
                        raise ConfigError(f"params.interrupts: {k} interruptions on a "
                                          f"{n_inst}-instance fleet")
                    plan = (interruption_plan(_spread(k, n_inst), p["recommend_at"],
                                              p["notice_after"]) if k else FaultPlan())
                    cfg = copy.copy(base)
                    cfg.mode = mode
                    cfg.fault_plan = plan
                    runs.append(PlannedRun(f"e2e-rebalance/{dev}/mode={mode}/interrupts={k}", cfg,
                                           {"device": dev, "mode": mode, "interrupts": k}))
    return runs


def lb_quality_cases(rng: random.Random, n_cases: int, max_chares: int = 12, max_pes: int = 4):
    """Equal-load, 2:1-rate balancing problems with a random initial placement."""
    for _ in range(n_cases):
        n_pes = rng.randint(2, max_pes)
        n_chares = rng.randint(n_pes, max_chares)
        n_fast = rng.randint(1, n_pes - 1)
        rates = {pe: (2.0 if pe < n_fast else 1.0) for pe in range(n_pes)}
        loads = {c: 1.0 for c in range(n_chares)}
        placement = {c: rng.randrange(n_pes) for c in range(n_chares)}
        yield LBInput(loads, placement, rates)


def lb_makespan_ratio(seed: int, n_cases: int) -> float:
    """Worst ratio of the balancer's makespan to the optimum over random small cases."""
    rng = random.Random(seed)
    worst = 1.0
    for inp in lb_quality_cases(rng, n_cases):
        got = predicted_makespan(inp, greedy_refine(inp))
        opt = brute_force_makespan(inp.loads, inp.rates)
        worst = max(worst, got / opt)
    return worst


def _record_run(rec: Recorder, label: str, res: RunResult, warmup: int) -> None:
    rec.record(label, "e2e_runtime_s", res.e2e_runtime)
    rec.record(label, "time_per_iter_s", res.time_per_iter(warmup))
    rec.record(label, "rescale_count", len(res.rescales))
    rec.record(label, "restart_count", res.restart_events)
    if res.rescales:
        rec.record(label, "rescale_total_s", res.rescale_total)
        for key, attr in (("checkpoint_s", "checkpoint"), ("load_balance_s", "load_balance"),
                          ("restart_s", "restart"), ("restore_s", "restore")):
            rec.record(label, key, sum(getattr(r.timings, attr) for r in res.rescales))
    if res.config.lb:
        rec.record(label, "lb_count", res.lb_count)
    for k, r in enumerate(res.rescales):
        rec.record_rescale(label, k, r.kind, res.config.mode, r.timings)


def run_scenario(s: Scenario, out_dir, trace: bool = False, json_mirror: bool = False,
                 calibration: Optional[Calibration] = None,
                 progress: Optional[Callable[[str], None]] = None) -> Path:
    """Run every run of ``s`` and write ``metrics.csv`` (and ``rescales.csv``) to ``out_dir``."""
    rec, results = execute(s, calibration, trace=trace, progress=progress)
    path = rec.flush(out_dir, json_mirror)
    if trace:
        tdir = Path(out_dir) / "traces"
        tdir.mkdir(parents=True, exist_ok=True)
        for label, res in results.items():
            name = label.replace("/", "__").replace("=", "-") + ".tsv"
            (tdir / name).write_text("".join(line + "\n" for line in res.trace))
    return path


def execute(s: Scenario, calibration: Optional[Calibration] = None, trace: bool = False,
            progress: Optional[Callable[[str], None]] = None):
    """Run a scenario in memory; returns ``(recorder, {label: RunResult})``."""
    cal = s.calibration_for(calibration)
    warmup = int(cal.runtime["warmup_iterations"])
    rec = Recorder(s.seed)
    results: dict[str, RunResult] = {}
    planned = plan_runs(s, cal)
    for pr in planned:
        if progress:
            progress(pr.label)
        pr.config.trace = trace
        res = run(pr.config, cal)
        results[pr.label] = res
        _record_run(rec, pr.label, res, warmup)
        w = pr.config.workload
        rec.record(pr.label, "pes", _pe_count(cal, pr.config))
        rec.record(pr.label, "instances", sum(n for _, n in pr.config.fleet))
        rec.record(pr.label, "iterations", w.iterations)
        rec.record(pr.label, "chares", _chare_count(w, cal, pr.config))
    _derived(s, cal, rec, planned, results, warmup)
    return rec, results


def _pe_count(cal: Calibration, cfg: RunConfig) -> int:
    return sum(cal.profile(p).pes_per_instance * n for p, n in cfg.fleet)


def _chare_count(w, cal: Calibration, cfg: RunConfig) -> int:
    if isinstance(w, SyntheticConfig):
        return w.chare_count
    return _pe_count(cal, cfg) * w.od_factor


def _derived(s: Scenario, cal: Calibration, rec: Recorder, planned, results, warmup: int) -> None:
    p = s.resolved_params()
    if s.name == "hetero-lb":
        groups = {}
        for pr in planned:
            groups.setdefault(pr.info["workload"], {})[pr.info["lb"]] = results[pr.label]
        for name, pair in groups.items():
            if False in pair and True in pair:
                off = pair[False].time_per_iter(warmup)
                on = pair[True].time_per_iter(warmup)
                rec.record(f"hetero-lb/{name}", "lb_improvement", (off - on) / off)
        rec.record("hetero-lb/small-cases", "lb_makespan_ratio",
                   lb_makespan_ratio(s.seed, int(p["lb_cases"])))
    elif s.name == "e2e-rebalance":
        base = {pr.info["device"]: results[pr.label].e2e_runtime
                for pr in planned if pr.info.get("baseline")}
        for pr in planned:
            if pr.info.get("baseline"):
                continue
            b = base[pr.info["device"]]
            rec.record(pr.label, "e2e_baseline_s", b)
            rec.record(pr.label, "interruptions", pr.info["interrupts"])
            rec.record(pr.label, "overhead_fraction", (results[pr.label].e2e_runtime - b) / b)
    elif s.name == "interruption-overhead":
        for pr in planned:
            res = results[pr.label]
            tm = cal.timing(pr.config.timing)
            restarts = sum(r.timings.restart for r in res.rescales)
            if res.daemon_up_events and restarts:
                rec.record(pr.label, "daemon_startup_delta",
                           tm.daemon_startup * _expanding(res) / restarts)


def _expanding(res: RunResult) -> int:
    return sum(1 for r in res.rescales if r.request.add)

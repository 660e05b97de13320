"""JSON run configuration: parsing into a :class:`Scenario` and validation.

A config file is one object. Preset runs use ``scenario`` and optionally
``params`` (overrides of the preset's parameters); a file without
``scenario`` describes a single custom run with ``workload``, ``fleet`` and
optionally ``fault_plan``. Both may carry ``seed``, ``mode``, ``t_timeout``
and ``calibration`` overrides.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping, Optional

from .fleet import FaultPlan
from .machine import Calibration, CheckpointMode, ConfigError, load_calibration, merge_calibration
from .scenarios import PRESETS, Scenario, plan_runs
from .simulation import MODES, RunConfig
from .workload import StencilConfig, SyntheticConfig, block_layout

TOP_KEYS = {"scenario", "seed", "mode", "t_timeout", "params", "calibration", "workload",
            "fleet", "network", "timing", "checkpoint_mode", "lb", "launch_delay",
            "fault_plan"}


def read_config(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def validate_config(source, base_dir: Optional[Path] = None) -> list[str]:
    """Every problem found in a config, each prefixed with its path; empty means ok."""
    if isinstance(source, (str, Path)):
        base_dir = Path(source).parent
        try:
            data = read_config(source)
        except (OSError, ConfigError) as exc:
            return [str(exc)]
    else:
        data = source
    errors: list[str] = []

    for key in sorted(set(data) - TOP_KEYS):
        errors.append(f"{key}: unknown key")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        errors.append(f"seed: must be an integer in [0, 2**64), got {seed!r}")
    if "mode" in data and data["mode"] not in MODES:
        errors.append(f"mode: must be one of {', '.join(MODES)}, got {data['mode']!r}")
    if "t_timeout" in data and not _positive(data["t_timeout"]):
        errors.append(f"t_timeout: must be a positive number, got {data['t_timeout']!r}")

    cal = None
    try:
        cal = _calibration(data)
    except ConfigError as exc:
        errors.append(f"calibration: {exc}")
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(f"calibration: malformed entry ({exc})")

    name = data.get("scenario", "custom")
    if name != "custom" and name not in PRESETS:
        errors.append(f"scenario: unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
        return errors
    if name == "custom":
        errors += _validate_custom(data, cal, base_dir)
    else:
        for key in ("workload", "fleet", "fault_plan"):
            if key in data:
                errors.append(f"{key}: only allowed for custom runs; use params for presets")
        params = data.get("params", {})
        if not isinstance(params, dict):
            errors.append("params: must be an object")
            params = {}
        for key in sorted(set(params) - set(PRESETS[name])):
            errors.append(f"params.{key}: not a parameter of {name}")
        if cal is not None and not errors:
            errors += _validate_preset(name, params, data, cal)
    return errors


def _positive(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0


def _calibration(data: Mapping) -> Calibration:
    over = data.get("calibration", {})
    if not isinstance(over, dict):
        raise ConfigError("must be an object")
    return merge_calibration(load_calibration(), over) if over else load_calibration()


def _validate_preset(name: str, params: dict, data: Mapping, cal: Calibration) -> list[str]:
    errors = []
    try:
        s = scenario_from_dict(data)
        runs = plan_runs(s, cal)
    except ConfigError as exc:
        return [str(exc)]
    except (TypeError, ValueError, KeyError) as exc:
        return [f"params: {exc}"]
    for pr in runs:
        for msg in check_run(pr.config, cal):
            errors.append(f"params ({pr.label}): {msg}")
    return errors


def check_run(cfg: RunConfig, cal: Calibration) -> list[str]:
    """Config-time checks for one run; messages name the offending field."""
    errors = []
    profiles = []
    for k, (pname, count) in enumerate(cfg.fleet):
        try:
            profiles.append((k, cal.profile(pname), count))
        except ConfigError as exc:
            errors.append(f"fleet[{k}].profile: {exc}")
        if not isinstance(count, int) or count < 1:
            errors.append(f"fleet[{k}].count: must be a positive integer, got {count!r}")
    for label, getter, name in (("network", cal.network, cfg.network),
                                ("timing", cal.timing, cfg.timing)):
        try:
            getter(name)
        except ConfigError as exc:
            errors.append(f"{label}: {exc}")
    if errors:
        return errors
    pe_count = sum(p.pes_per_instance * n for _, p, n in profiles)
    w = cfg.workload
    if isinstance(w, StencilConfig):
        try:
            block_layout(w, pe_count)
        except ConfigError as exc:
            errors.append(f"workload.od_factor: {exc}")
    mode = cfg.resolved_checkpoint_mode(cal)
    if mode is CheckpointMode.DAEMON:
        for k, p, _ in profiles:
            if not p.has_device:
                errors.append(f"checkpoint_mode: {mode.value} needs device-bearing instances; "
                              f"fleet[{k}] profile {p.name!r} has none")
    n0 = sum(n for _, _, n in profiles)
    limit = n0 + len(cfg.fault_plan.events)
    for k, ev in enumerate(cfg.fault_plan.events):
        if ev.instance_index >= limit:
            errors.append(f"fault_plan[{k}].instance_index: {ev.instance_index} can never exist "
                          f"(fleet starts with {n0} instances)")
    if cfg.lb_period is not None and cfg.lb_period < 1:
        errors.append("lb.period: must be >= 1")
    return errors


def _validate_custom(data: Mapping, cal: Optional[Calibration], base_dir) -> list[str]:
    errors = []
    for key in ("workload", "fleet"):
        if key not in data:
            errors.append(f"{key}: required for a custom run")
    if "params" in data:
        errors.append("params: only allowed together with scenario")
    if errors:
        return errors
    try:
        cfg = run_config_from_dict(data, base_dir)
    except ConfigError as exc:
        return [str(exc)]
    if cal is None:
        return errors
    return check_run(cfg, cal)


def _workload(d: Any, fleet_pes: Optional[int]):
    if not isinstance(d, dict):
        raise ConfigError("workload: must be an object")
    kind = d.get("kind", "jacobi")
    try:
        if kind == "jacobi":
            return StencilConfig(int(d["grid_n"]), int(d.get("od_factor", 1)),
                                 int(d.get("iterations", 10)))
        if kind == "synthetic":
            if "chare_count" in d:
                n = int(d["chare_count"])
            else:
                n = int(d.get("chares_per_pe", 1)) * (fleet_pes or 1)
            return SyntheticConfig(n, float(d["work_per_iter"]), float(d.get("comm_bytes", 0)),
                                   int(d.get("iterations", 10)),
                                   int(d.get("state_bytes", 1 << 20)))
    except KeyError as exc:
        raise ConfigError(f"workload.{exc.args[0]}: required for {kind} workloads") from None
    except ConfigError as exc:
        raise ConfigError(f"workload: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"workload: {exc}") from None
    raise ConfigError(f"workload.kind: unknown workload {kind!r}; use jacobi or synthetic")


def run_config_from_dict(data: Mapping, base_dir=None) -> RunConfig:
    fleet_raw = data["fleet"]
    if not isinstance(fleet_raw, list) or not fleet_raw:
        raise ConfigError("fleet: must be a non-empty list of {profile, count}")
    fleet = []
    for k, ent in enumerate(fleet_raw):
        if not isinstance(ent, dict) or "profile" not in ent:
            raise ConfigError(f"fleet[{k}]: needs a profile name")
        fleet.append((ent["profile"], ent.get("count", 1)))
    cal = _calibration(data)
    pes = 0
    for name, count in fleet:
        if name in cal.profiles and isinstance(count, int):
            pes += cal.profiles[name].pes_per_instance * count
    w = _workload(data["workload"], pes)
    plan_raw = data.get("fault_plan", [])
    if isinstance(plan_raw, str):
        path = Path(plan_raw)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            plan = FaultPlan.load(path)
        except OSError as exc:
            raise ConfigError(f"fault_plan: cannot read {path} ({exc})") from None
    else:
        plan = FaultPlan.from_records(plan_raw)
    ck = data.get("checkpoint_mode")
    if ck is not None:
        try:
            ck = CheckpointMode(ck)
        except ValueError:
            raise ConfigError(f"checkpoint_mode: unknown mode {ck!r}; choose from "
                              f"{', '.join(m.value for m in CheckpointMode)}") from None
    lb = data.get("lb", {})
    if isinstance(lb, bool):
        lb = {"enabled": lb}
    return RunConfig(
        workload=w, fleet=fleet, network=data.get("network", "tcp"),
        timing=data.get("timing", "cpu"), mode=data.get("mode", "C"), checkpoint_mode=ck,
        lb=bool(lb.get("enabled", False)), lb_period=lb.get("period"),
        t_timeout=data.get("t_timeout"), launch_delay=data.get("launch_delay"),
        fault_plan=plan, seed=int(data.get("seed", 0)))


def scenario_from_dict(data: Mapping, base_dir=None) -> Scenario:
    name = data.get("scenario", "custom")
    s = Scenario(name, dict(data.get("params", {})), int(data.get("seed", 0)),
                 data.get("t_timeout"), dict(data.get("calibration", {})))
    if "mode" in data and "modes" in PRESETS.get(name, {}):
        s.params.setdefault("modes", [data["mode"]])
    if name == "custom":
        s.custom = run_config_from_dict(data, base_dir)
    return s

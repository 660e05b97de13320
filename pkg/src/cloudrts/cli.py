"""Command line: ``cloudrts --scenario e2e-rebalance --out results/``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import read_config, scenario_from_dict, validate_config
from .machine import ConfigError
from .scenarios import PRESETS, Scenario, run_scenario
from .simulation import MODES


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cloudrts",
        description="Simulate a migratable-object runtime on a spot fleet and write metrics.")
    ap.add_argument("--scenario", choices=sorted(PRESETS),
                    help="preset experiment to run (omit to run a custom --config)")
    ap.add_argument("--config", help="JSON config file (preset overrides or a custom run)")
    ap.add_argument("--seed", type=int, help="run seed (default 0)")
    ap.add_argument("--mode", choices=MODES, help="interruption handling mode")
    ap.add_argument("--t-timeout", type=float, dest="t_timeout",
                    help="seconds to wait for replacements before rescaling anyway")
    ap.add_argument("--od", type=_ints, help="overdecomposition factors, e.g. 1,4,8")
    ap.add_argument("--pes", type=int, help="PE count for od-scaling")
    ap.add_argument("--instances", type=_ints, help="instance count(s)")
    ap.add_argument("--interrupt", type=_ints, help="interruption counts for e2e-rebalance")
    ap.add_argument("--network", help="network model name from the calibration")
    ap.add_argument("--device", choices=("cpu", "gpu"), help="restrict to one device class")
    ap.add_argument("--trace", action="store_true", help="also write per-run event traces")
    ap.add_argument("--json", action="store_true", help="also write metrics.json")
    ap.add_argument("--out", default="results", help="output directory (default: results)")
    ap.add_argument("--validate", action="store_true",
                    help="only check --config and report problems")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def _apply_flags(s: Scenario, args) -> None:
    if s.name == "custom":
        cfg = s.custom
        if args.mode:
            cfg.mode = args.mode
        if args.t_timeout is not None:
            cfg.t_timeout = args.t_timeout
        if args.seed is not None:
            cfg.seed = args.seed
        return
    params = PRESETS[s.name]
    if args.mode and "modes" in params:
        s.params["modes"] = [args.mode]
    if args.od and "od" in params:
        s.params["od"] = args.od
    if args.pes is not None and "pes" in params:
        s.params["pes"] = args.pes
    if args.instances:
        if isinstance(params.get("instances"), list):
            s.params["instances"] = args.instances
        elif "instances" in params:
            s.params["instances"] = args.instances[0]
    if args.interrupt is not None and "interrupts" in params:
        s.params["interrupts"] = args.interrupt
    if args.network and "network" in params:
        s.params["network"] = args.network
    if args.device and "devices" in params:
        s.params["devices"] = [args.device]
    if args.t_timeout is not None:
        s.t_timeout = args.t_timeout


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.validate:
        if not args.config:
            print("--validate needs --config", file=sys.stderr)
            return 2
        problems = validate_config(args.config)
        for p in problems:
            print(p)
        if not problems:
            print("ok")
        return 1 if problems else 0
    try:
        if args.config:
            data = read_config(args.config)
            if args.scenario:
                data["scenario"] = args.scenario
            base = Path(args.config).parent
            problems = validate_config(data, base)
            if problems:
                for p in problems:
                    print(f"config error: {p}", file=sys.stderr)
                return 2
            s = scenario_from_dict(data, base)
        elif args.scenario:
            s = Scenario(args.scenario)
        else:
            print("give --scenario or --config", file=sys.stderr)
            return 2
        if args.seed is not None:
            s.seed = args.seed
        _apply_flags(s, args)
        t0 = time.perf_counter()
        progress = None if args.quiet else (lambda label: print(f"running {label}", file=sys.stderr))
        path = run_scenario(s, args.out, trace=args.trace, json_mirror=args.json,
                            progress=progress)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(f"wrote {path} in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Randomised spot-event cases for the manager, plus a log checker.

Each case drives a :class:`CloudManager` against a :class:`FixedCostExecutor`
and the checker replays the manager log, reporting every broken invariant
as a human-readable string.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from cloudrts.fleet import (CloudManager, FaultEvent, FaultPlan, Fleet, FixedCostExecutor,
                            InstanceState, SpotKind, Trigger)
from cloudrts.machine import CheckpointMode
from cloudrts.simkernel import Engine

GRACE = 120.0


@dataclass
class Case:
    seed: int
    n: int
    mode: str
    t_timeout: float
    launch_delay: float
    launch_jitter: float
    evacuate: float
    rest: float
    events: list


def random_case(seed: int) -> Case:
    rng = random.Random(seed)
    n = rng.randint(1, 8)
    k = rng.randint(0, 12)
    # a coarse time grid makes same-instant collisions common
    step = rng.choice([1.0, 5.0, 30.0])
    times = sorted(round(rng.uniform(0.0, 400.0) / step) * step for _ in range(k))
    events = []
    for t in times:
        kind = (SpotKind.REBALANCE_RECOMMENDATION if rng.random() < 0.6
                else SpotKind.INTERRUPTION_NOTICE)
        # ids beyond the bootstrap fleet address replacements by launch order
        events.append(FaultEvent(t, kind, rng.randrange(n + k)))
    return Case(seed, n, rng.choice("ABCCC"), rng.choice([30.0, 60.0, 120.0]),
                rng.choice([0.0, 10.0, 30.0, 90.0, 200.0]), rng.choice([0.0, 0.0, 15.0]),
                rng.uniform(0.5, 10.0), rng.uniform(1.0, 30.0), events)


def run_case(case: Case):
    engine = Engine(case.seed)
    fleet = Fleet()
    fleet.bootstrap("p", case.n)
    ex = FixedCostExecutor(engine, case.evacuate, case.rest)
    mgr = CloudManager(engine, fleet, case.mode, ex, CheckpointMode.IN_MEMORY, "p",
                       t_timeout=case.t_timeout, t_grace=GRACE,
                       launch_delay=case.launch_delay, launch_jitter=case.launch_jitter,
                       strict_grace=False)
    ex.manager = mgr
    mgr.start(FaultPlan(case.events))
    engine.run()
    return mgr, ex


def check_case(case: Case, mgr: CloudManager, ex: FixedCostExecutor) -> list[str]:
    bad: list[str] = []
    T = case.t_timeout
    fleet = mgr.fleet

    # executor: never two rescales at once, all finished
    spans = sorted((s, e) for s, e, _ in ex.started)
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        if e0 is None or s1 < e0:
            bad.append(f"rescales overlap: one started at {s1} before the previous ended at {e0}")
    if any(e is None for _, e in spans):
        bad.append("a rescale never finished")
    ends = {e for _, e in spans}

    open_at = None
    pending = None          # (trigger time, kind) of a submitted, not yet built request
    leaving: set = set()
    ready_at: dict = {}
    notice_at: dict = {}
    emergency_due: list = []   # (time, instance) notices not covered by a pending request
    triggers: set = set()
    for entry in mgr.log:
        t, what = entry[0], entry[1]
        if what == "cycle-open":
            if open_at is not None:
                bad.append(f"t={t}: cycle opened while one was already open")
            open_at = t
        elif what == "ready":
            ready_at[entry[2]] = t
        elif what == "notice":
            i = entry[2]
            notice_at[i] = t
            if i not in leaving and pending is None:
                emergency_due.append((t, i))
        elif what == "trigger":
            kind, logged_oldest = entry[2], entry[3]
            if pending is not None:
                bad.append(f"t={t}: second request submitted while one was pending")
            pending = (t, kind)
            triggers.add((t, kind))
            if kind != "absorb-spares":
                if open_at is None:
                    bad.append(f"t={t}: {kind} trigger with no open cycle")
                if kind == Trigger.TIMEOUT.value and t != logged_oldest + T:
                    bad.append(f"t={t}: timeout fired, expected exactly {logged_oldest + T}")
                if kind != Trigger.TIMEOUT.value and t > logged_oldest + T:
                    bad.append(f"t={t}: {kind} fired after the timeout deadline "
                               f"{logged_oldest + T}")
        elif what == "request":
            kind, remove, add = entry[2], entry[3], entry[4]
            if pending is None:
                bad.append(f"t={t}: request built without a trigger")
                continue
            ts, _ = pending
            if t != ts and t not in ends:
                bad.append(f"t={t}: request signalled at {ts} built while the executor was idle")
            if kind != "absorb-spares":
                if open_at is None:
                    bad.append(f"t={t}: cycle request with no open cycle")
                open_at = None
            for r in add:
                if r in ready_at and ts - ready_at[r] > T:
                    bad.append(f"replacement {r} ready at {ready_at[r]} idle until {ts} "
                               f"(> t_timeout {T})")
            leaving |= set(remove)
            pending = None
        elif what == "released":
            leaving.discard(entry[2])

    # a notice that no pending request will absorb fires the override at once
    for tn, i in emergency_due:
        if (tn, Trigger.EMERGENCY_OVERRIDE.value) not in triggers:
            bad.append(f"t={tn}: notice for {i} did not trigger an emergency override")
    if open_at is not None or mgr.st.cycle_open:
        bad.append("cycle still open at the end of the run")
    if pending is not None:
        bad.append("request still pending at the end of the run")

    # one rescale per cycle: request records with a trigger == cycles opened
    opened = sum(1 for e in mgr.log if e[1] == "cycle-open")
    closed = sum(1 for _, trig, _, _ in mgr.requests if trig is not None)
    if opened != closed:
        bad.append(f"{opened} cycles opened but {closed} cycle requests emitted")

    # grace: every noticed instance that held work evacuated within the grace period
    bad += [f"grace: {v}" for v in mgr.violations]
    for i, tn in notice_at.items():
        inst = fleet.instances[i]
        held = any(i in req.remove for _, _, req in ex.started)
        if held:
            if inst.evacuated_at is None or inst.evacuated_at > tn + GRACE:
                bad.append(f"grace: instance {i} noticed at {tn} evacuated at {inst.evacuated_at}")

    # nothing left idle: every ready launch ends attached or terminated
    for i, inst in fleet.instances.items():
        if inst.state is InstanceState.RUNNING and not inst.attached:
            bad.append(f"instance {i} ready at {inst.ready_at} but never absorbed")
        if inst.state is InstanceState.LAUNCHING:
            bad.append(f"instance {i} still launching at the end of the run")
    return bad

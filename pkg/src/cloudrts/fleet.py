"""Spot fleet model and the capacity-rebalancing manager.

The manager collects at-risk instances into a *cycle* and signals a single
rescale once one of three conditions holds: every at-risk instance has a
ready replacement, an at-risk instance got an interruption notice, or
``t_timeout`` seconds passed since the oldest recommendation of the cycle.

Fault plans address instances by launch order: index ``k`` is the k-th
instance ever launched, so the initial fleet is ``0..n-1`` and replacements
continue the numbering. A signal for an instance that already left the fleet
is ignored.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .elasticity import RescaleRequest
from .machine import CheckpointMode, ConfigError
from .simkernel import Engine

log = logging.getLogger(__name__)


class GraceViolation(RuntimeError):
    """An interrupted instance was reclaimed before its chares were safe."""


class InstanceState(enum.Enum):
    LAUNCHING = "launching"
    RUNNING = "running"
    AT_RISK = "at_risk"
    INTERRUPTING = "interrupting"
    TERMINATED = "terminated"


_LEGAL = {
    InstanceState.LAUNCHING: {InstanceState.RUNNING, InstanceState.TERMINATED},
    InstanceState.RUNNING: {InstanceState.AT_RISK, InstanceState.INTERRUPTING,
                            InstanceState.TERMINATED},
    InstanceState.AT_RISK: {InstanceState.INTERRUPTING, InstanceState.TERMINATED},
    InstanceState.INTERRUPTING: {InstanceState.TERMINATED},
    InstanceState.TERMINATED: set(),
}


@dataclass
class Instance:
    id: int
    profile: str
    state: InstanceState
    launched_at: float
    slot: Optional[int] = None
    attached: bool = False
    ready_at: Optional[float] = None
    evacuated_at: Optional[float] = None
    history: list = field(default_factory=list)

    def transition(self, new: InstanceState, at: float) -> None:
        if new is self.state:
            return
        if new not in _LEGAL[self.state]:
            raise ValueError(f"instance {self.id}: illegal transition "
                             f"{self.state.value} -> {new.value}")
        self.history.append((at, self.state, new))
        self.state = new


class Fleet:
    """All instances ever launched, plus the slot table."""

    def __init__(self):
        self.instances: dict[int, Instance] = {}
        self.slots: list[Optional[int]] = []
        self._next_id = 0

    def launch(self, profile: str, at: float, slot: Optional[int] = None,
               running: bool = False) -> Instance:
        inst = Instance(self._next_id, profile,
                        InstanceState.RUNNING if running else InstanceState.LAUNCHING, at, slot)
        if running:
            inst.ready_at = at
        self.instances[inst.id] = inst
        self._next_id += 1
        return inst

    def bootstrap(self, profile: str, count: int) -> list[Instance]:
        out = []
        for k in range(count):
            inst = self.launch(profile, 0.0, slot=len(self.slots), running=True)
            inst.attached = True
            self.slots.append(inst.id)
            out.append(inst)
        return out

    def in_slot(self, slot: int) -> Optional[Instance]:
        if not 0 <= slot < len(self.slots) or self.slots[slot] is None:
            return None
        return self.instances[self.slots[slot]]

    def members(self) -> set[int]:
        return {i.id for i in self.instances.values() if i.attached}

    def place_in_slot(self, inst: Instance, slot: Optional[int]) -> None:
        if slot is None or slot >= len(self.slots) or self.slots[slot] is not None:
            free = [k for k, v in enumerate(self.slots) if v is None]
            if free:
                slot = free[0]
            else:
                self.slots.append(None)
                slot = len(self.slots) - 1
        inst.slot = slot
        self.slots[slot] = inst.id

    def take_over(self, old: Instance, new: Instance) -> None:
        """``new`` fills the slot of ``old`` (which is on its way out)."""
        new.slot = old.slot
        if old.slot is not None:
            self.slots[old.slot] = new.id

    def vacate(self, inst: Instance) -> None:
        if inst.slot is not None and inst.slot < len(self.slots) and self.slots[inst.slot] == inst.id:
            self.slots[inst.slot] = None


class SpotKind(enum.Enum):
    REBALANCE_RECOMMENDATION = "rebalance-recommendation"
    INTERRUPTION_NOTICE = "interruption-notice"


@dataclass(frozen=True)
class SpotEvent:
    kind: SpotKind
    instance_id: int
    at: float
    grace: Optional[float] = None


class Trigger(enum.Enum):
    COMPLETE_REPLACEMENT = "complete-replacement"
    EMERGENCY_OVERRIDE = "emergency-override"
    TIMEOUT = "timeout"


@dataclass
class ManagerState:
    at_risk: dict = field(default_factory=dict)              # id -> recommendation time
    replacements_pending: dict = field(default_factory=dict)  # at-risk id -> launch id | None
    replacements_ready: dict = field(default_factory=dict)    # launch id -> ready time
    noticed: set = field(default_factory=set)
    oldest_rec_at: Optional[float] = None
    t_timeout: float = 120.0
    # unreplaced at-risk instance -> its replacement still launching
    carryover: dict = field(default_factory=dict)
    # launches not bound to any at-risk instance (absorbed once ready)
    orphans: set = field(default_factory=set)
    spares: dict = field(default_factory=dict)                # ready, unbound -> ready time
    # ready replacements that are themselves at risk and will never be absorbed
    discard: list = field(default_factory=list)

    @property
    def cycle_open(self) -> bool:
        return bool(self.at_risk)

    def _bound_launches(self) -> set:
        return {r for r in self.replacements_pending.values() if r is not None}

    def check(self) -> None:
        if self.at_risk:
            assert self.oldest_rec_at == min(self.at_risk.values())
        else:
            assert self.oldest_rec_at is None
        assert self.noticed <= set(self.at_risk)


def _join(st: ManagerState, inst_id: int, at: float, launch) -> None:
    st.at_risk[inst_id] = at
    if inst_id in st.carryover:
        st.replacements_pending[inst_id] = st.carryover.pop(inst_id)
    elif inst_id not in st.replacements_pending:
        st.replacements_pending[inst_id] = launch(inst_id) if launch else None
    st.oldest_rec_at = min(st.at_risk.values())


def on_spot_event(ev: SpotEvent, st: ManagerState, launch: Optional[Callable[[int], int]] = None,
                  is_replacement: Callable[[int], bool] = lambda i: False) -> ManagerState:
    """Fold one provider signal into the manager state.

    ``launch(at_risk_id)`` starts a replacement and returns its id; it is only
    called for recommendations.
    """
    i = ev.instance_id
    if is_replacement(i):
        log.warning("replacement %d flagged (%s) before it joined the fleet; "
                    "treating it as a new at-risk member of the cycle", i, ev.kind.value)
    if ev.kind is SpotKind.REBALANCE_RECOMMENDATION:
        if i in st.at_risk:
            return st
        _join(st, i, ev.at, launch)
    else:
        if i not in st.at_risk:
            _join(st, i, ev.at, None)
        st.noticed.add(i)
    return st


def replacement_ready(r: int, at: float, st: ManagerState, members: set) -> ManagerState:
    """Record that launch ``r`` finished booting at time ``at``."""
    if r in st._bound_launches():
        st.replacements_ready[r] = at
        return st
    for a, pending in list(st.carryover.items()):
        if pending == r:
            del st.carryover[a]
            if a in members:
                # reopen a cycle so the swap happens immediately
                st.at_risk[a] = at
                st.replacements_pending[a] = r
                st.replacements_ready[r] = at
                st.oldest_rec_at = min(st.at_risk.values())
            else:
                st.spares[r] = at
            return st
    st.orphans.discard(r)
    st.spares[r] = at
    return st


def _available(st: ManagerState) -> list:
    """Ready replacements usable this cycle, oldest first."""
    pool = [(t, r) for r, t in st.replacements_ready.items() if r not in st.at_risk]
    pool += [(t, r) for r, t in st.spares.items() if r not in st.at_risk]
    return [r for _, r in sorted(pool)]


def evaluate_trigger(st: ManagerState, now: float, members: Optional[set] = None) -> Optional[Trigger]:
    if not st.cycle_open:
        return None
    if st.noticed & set(st.at_risk):
        return Trigger.EMERGENCY_OVERRIDE
    needing = [a for a in st.at_risk if members is None or a in members]
    if len(_available(st)) >= len(needing):
        return Trigger.COMPLETE_REPLACEMENT
    if now >= st.oldest_rec_at + st.t_timeout:
        return Trigger.TIMEOUT
    return None


def execute_rescale(trigger: Trigger, st: ManagerState, members: set,
                    mode: CheckpointMode = CheckpointMode.IN_MEMORY):
    """Close the current cycle and build its single combined rescale.

    Returns ``(request_or_None, pairs)`` where ``pairs`` maps each replaced
    instance to the replacement taking its place. ``None`` means the cycle
    closed without changing the fleet.
    """
    if trigger is None:
        raise ValueError("execute_rescale needs a trigger")
    pool = _available(st)
    order = sorted(st.at_risk, key=lambda a: (a not in st.noticed, st.at_risk[a], a))
    pairs: dict[int, int] = {}
    for a in order:
        if a not in members:
            continue
        own = st.replacements_pending.get(a)
        if own in pool:
            pool.remove(own)
            pairs[a] = own
        elif pool:
            pairs[a] = pool.pop(0)
    used = set(pairs.values())
    remove = set(pairs) | {a for a in st.noticed if a in members}
    add = set(used) | set(pool)   # leftovers are absorbed too rather than left idle
    # launches still in flight go to at-risk instances that stay, then to nobody
    in_flight = sorted(r for r in st._bound_launches()
                       if r not in st.replacements_ready and r not in st.at_risk)
    stay = [a for a in order if a in members and a not in remove]
    for a in stay:
        own = st.replacements_pending.get(a)
        if own in in_flight:
            in_flight.remove(own)
            st.carryover[a] = own
    for a in stay:
        if a not in st.carryover and in_flight:
            st.carryover[a] = in_flight.pop(0)
    st.orphans.update(in_flight)
    gone = [a for a in st.at_risk if a not in members]
    st.discard.extend(gone)
    for a in gone:
        st.spares.pop(a, None)
        st.orphans.discard(a)
    for r in add:
        st.replacements_ready.pop(r, None)
        st.spares.pop(r, None)
    st.replacements_ready.clear()
    st.at_risk.clear()
    st.replacements_pending.clear()
    st.noticed.clear()
    st.oldest_rec_at = None
    if not remove and not add:
        return None, pairs
    return RescaleRequest(frozenset(remove), frozenset(add), mode), pairs


# --------------------------------------------------------------------------
# fault plans


@dataclass(frozen=True)
class FaultEvent:
    time_s: float
    kind: SpotKind
    instance_index: int


@dataclass
class FaultPlan:
    events: list = field(default_factory=list)
    # None keeps the manager's configured values
    launch_delay: Optional[float] = None
    launch_jitter: Optional[float] = None

    def __post_init__(self):
        times = [e.time_s for e in self.events]
        for k in range(1, len(times)):
            if times[k] < times[k - 1]:
                raise ConfigError(f"fault_plan[{k}].time_s: {times[k]} is earlier than the "
                                  f"previous event at {times[k - 1]}; times must be non-decreasing")
        for k, t in enumerate(times):
            if t < 0:
                raise ConfigError(f"fault_plan[{k}].time_s: must be >= 0")
        if (self.launch_delay or 0.0) < 0 or (self.launch_jitter or 0.0) < 0:
            raise ConfigError("launch delay parameters must be non-negative")

    @classmethod
    def from_records(cls, records, **kw) -> "FaultPlan":
        events = []
        for k, rec in enumerate(records):
            try:
                kind = SpotKind(rec["kind"])
                events.append(FaultEvent(float(rec["time_s"]), kind, int(rec["instance_index"])))
            except KeyError as exc:
                raise ConfigError(f"fault_plan[{k}]: missing field {exc}") from None
            except ValueError:
                raise ConfigError(f"fault_plan[{k}]: bad value in {rec!r}") from None
            except TypeError:
                raise ConfigError(f"fault_plan[{k}]: expected an object, got {rec!r}") from None
            if events[-1].instance_index < 0:
                raise ConfigError(f"fault_plan[{k}].instance_index: must be >= 0")
        return cls(events, **kw)

    @classmethod
    def load(cls, path, **kw) -> "FaultPlan":
        data = json.loads(Path(path).read_text())
        if isinstance(data, dict):
            kw.setdefault("launch_delay", data.get("launch_delay"))
            kw.setdefault("launch_jitter", data.get("launch_jitter"))
            data = data["events"]
        return cls.from_records(data, **kw)

    def to_records(self) -> list:
        return [{"time_s": e.time_s, "kind": e.kind.value, "instance_index": e.instance_index}
                for e in self.events]


def interruption_plan(instances, at: float, notice_after: Optional[float] = 60.0,
                      recommend: bool = True) -> FaultPlan:
    """Recommendations at ``at`` for each instance, then notices ``notice_after`` later."""
    events = []
    if recommend:
        events += [FaultEvent(at, SpotKind.REBALANCE_RECOMMENDATION, i) for i in instances]
    if notice_after is not None:
        events += [FaultEvent(at + notice_after, SpotKind.INTERRUPTION_NOTICE, i) for i in instances]
    return FaultPlan(events)


# --------------------------------------------------------------------------
# driver


class CloudManager:
    """Event-driven manager: provider signals in, rescale requests out.

    ``mode`` is ``"A"`` (shared filesystem, reactive), ``"B"`` (in-memory,
    reactive) or ``"C"`` (in-memory with capacity rebalancing). In the
    reactive modes recommendations are dropped and replacements launch only
    after the interrupted instance is reclaimed.
    """

    def __init__(self, engine: Engine, fleet: Fleet, mode: str, executor,
                 checkpoint_mode: CheckpointMode, profile: str, t_timeout: float = 120.0,
                 t_grace: float = 120.0, launch_delay: float = 30.0, launch_jitter: float = 0.0,
                 strict_grace: bool = True, tick_period: Optional[float] = None):
        if mode not in ("A", "B", "C"):
            raise ConfigError(f"mode must be A, B or C, not {mode!r}")
        self.engine = engine
        self.fleet = fleet
        self.mode = mode
        self.executor = executor
        self.checkpoint_mode = checkpoint_mode
        self.profile = profile
        self.st = ManagerState(t_timeout=t_timeout)
        self.t_grace = t_grace
        self.launch_delay = launch_delay
        self.launch_jitter = launch_jitter
        self.strict_grace = strict_grace
        self.tick_period = tick_period
        self._tick_pending_at: Optional[float] = None
        self._requested = False
        self.leaving: set[int] = set()
        self.slot_launch: dict[int, int] = {}
        self.log: list[tuple] = []
        self.requests: list[tuple] = []      # (time, trigger, request|None, pairs)
        self.notices: dict[int, float] = {}
        self.violations: list[str] = []
        self.rescales_in_flight = 0

    @property
    def reactive(self) -> bool:
        return self.mode in ("A", "B")

    def start(self, plan: FaultPlan) -> None:
        if plan.launch_delay is not None:
            self.launch_delay = plan.launch_delay
        if plan.launch_jitter is not None:
            self.launch_jitter = plan.launch_jitter
        for ev in plan.events:
            self.engine.schedule_at(ev.time_s, f"spot-event:{ev.kind.value}",
                                    self._spot, ev.kind, ev.instance_index)
        if self.tick_period:
            self.engine.schedule_in(self.tick_period, "manager-tick", self._periodic_tick)

    # -- provider side

    def _launch(self, slot: Optional[int]) -> int:
        delay = self.launch_delay
        if self.launch_jitter:
            delay += self.engine.rng.uniform(0.0, self.launch_jitter)
        occupant = self.fleet.in_slot(slot) if slot is not None else None
        profile = occupant.profile if occupant is not None else self.profile
        inst = self.fleet.launch(profile, self.engine.now, slot)
        self.engine.schedule_in(delay, "instance-launched", self._launched, inst.id)
        if slot is not None:
            self.slot_launch[slot] = inst.id
        self.log.append((self.engine.now, "launch", inst.id, slot))
        return inst.id

    def _launched(self, inst_id: int) -> None:
        inst = self.fleet.instances[inst_id]
        if inst.state is InstanceState.TERMINATED:
            return
        inst.transition(InstanceState.RUNNING, self.engine.now)
        inst.ready_at = self.engine.now
        if inst.slot is not None and self.slot_launch.get(inst.slot) == inst_id:
            del self.slot_launch[inst.slot]
        self.log.append((self.engine.now, "ready", inst_id))
        was_open = self.st.cycle_open
        replacement_ready(inst_id, self.engine.now, self.st, self.fleet.members())
        if self.st.cycle_open and not was_open:
            self.log.append((self.engine.now, "cycle-open"))
        self._poke()

    def _spot(self, kind: SpotKind, index: int) -> None:
        inst = self.fleet.instances.get(index)
        now = self.engine.now
        if inst is None or inst.state is InstanceState.TERMINATED:
            log.warning("%s for unknown or terminated instance %d ignored", kind.value, index)
            self.log.append((now, "ignored", kind.value, index))
            return
        if kind is SpotKind.REBALANCE_RECOMMENDATION:
            if self.reactive:
                return
            if inst.id in self.leaving:
                return
            if inst.state is InstanceState.RUNNING:
                inst.transition(InstanceState.AT_RISK, now)
            self.log.append((now, "recommendation", inst.id))
            was_open = self.st.cycle_open
            on_spot_event(SpotEvent(kind, inst.id, now), self.st,
                          launch=lambda a: self._launch(self.fleet.instances[a].slot),
                          is_replacement=lambda i: not self.fleet.instances[i].attached)
            if self.st.cycle_open and not was_open:
                self.log.append((now, "cycle-open"))
        else:
            if inst.id in self.notices:
                return
            if inst.state is not InstanceState.LAUNCHING:
                inst.transition(InstanceState.INTERRUPTING, now)
            self.notices[inst.id] = now
            self.log.append((now, "notice", inst.id))
            self.engine.schedule_in(self.t_grace, "instance-terminated", self._reclaim, inst.id)
            if inst.id not in self.leaving:
                was_open = self.st.cycle_open
                on_spot_event(SpotEvent(kind, inst.id, now, self.t_grace), self.st)
                if self.st.cycle_open and not was_open:
                    self.log.append((now, "cycle-open"))
        self._poke()

    def _reclaim(self, inst_id: int) -> None:
        inst = self.fleet.instances[inst_id]
        now = self.engine.now
        if inst.attached and inst.evacuated_at is None:
            msg = f"instance {inst_id} reclaimed at t={now} before its chares were evacuated"
            self.violations.append(msg)
            if self.strict_grace:
                raise GraceViolation(msg)
        if inst.state is not InstanceState.TERMINATED:
            inst.transition(InstanceState.TERMINATED, now)
        self.log.append((now, "reclaimed", inst_id))
        slot = inst.slot
        replaced = slot is not None and self.fleet.slots[slot] not in (None, inst_id)
        if not replaced and slot not in self.slot_launch and not self._has_replacement(inst_id):
            self._launch(slot)

    def _has_replacement(self, inst_id: int) -> bool:
        return (self.st.replacements_pending.get(inst_id) is not None
                or inst_id in self.st.carryover)

    # -- manager side

    def _poke(self) -> None:
        """Re-evaluate after every other event at the current instant has run."""
        now = self.engine.now
        if self._tick_pending_at == now:
            return
        self._tick_pending_at = now
        self.engine.schedule_at(now, "manager-tick", self._tick)

    def _periodic_tick(self) -> None:
        self._tick()
        self.engine.schedule_in(self.tick_period, "manager-tick", self._periodic_tick)

    def _tick(self) -> None:
        now = self.engine.now
        if self._tick_pending_at == now:
            self._tick_pending_at = None
        if self._requested:
            return
        members = self.fleet.members() - self.leaving
        if self.st.cycle_open:
            trig = evaluate_trigger(self.st, now, members)
            if trig is None:
                deadline = self.st.oldest_rec_at + self.st.t_timeout
                if deadline > now:
                    self.engine.schedule_at(deadline, "manager-tick", self._tick)
                return
            self._requested = True
            self.log.append((now, "trigger", trig.value, self.st.oldest_rec_at))
            self.executor.submit(lambda: self._build(trig))
        elif self.st.spares:
            self._requested = True
            self.log.append((now, "trigger", "absorb-spares", None))
            self.executor.submit(lambda: self._build(None))

    def _build(self, trig: Optional[Trigger]) -> Optional[RescaleRequest]:
        now = self.engine.now
        self._requested = False
        members = self.fleet.members() - self.leaving
        if trig is None:
            spares = sorted(r for r in self.st.spares if r not in self.st.at_risk)
            for r in spares:
                del self.st.spares[r]
            req = RescaleRequest(frozenset(), frozenset(spares), self.checkpoint_mode) \
                if spares else None
            pairs = {}
        else:
            req, pairs = execute_rescale(trig, self.st, members, self.checkpoint_mode)
        for d in self.st.discard:
            for a, r in list(self.st.carryover.items()):
                if r == d:
                    del self.st.carryover[a]
            inst = self.fleet.instances[d]
            if not inst.attached and inst.state is not InstanceState.TERMINATED:
                inst.transition(InstanceState.TERMINATED, now)
        self.st.discard.clear()
        self.requests.append((now, trig, req, dict(pairs)))
        self.log.append((now, "request", trig.value if trig else "absorb-spares",
                         sorted(req.remove) if req else [], sorted(req.add) if req else []))
        if req is not None:
            self.leaving |= set(req.remove)
            for a, r in pairs.items():
                self.fleet.take_over(self.fleet.instances[a], self.fleet.instances[r])
            for r in sorted(set(req.add) - set(pairs.values())):
                inst = self.fleet.instances[r]
                self.fleet.place_in_slot(inst, inst.slot)
            for r in req.add:
                self.fleet.instances[r].attached = True
            self.rescales_in_flight += 1
        # anything that became true meanwhile gets looked at again
        self._poke()
        return req

    def on_evacuated(self, ids, at: float) -> None:
        for i in ids:
            self.fleet.instances[i].evacuated_at = at

    def on_released(self, inst_id: int) -> None:
        inst = self.fleet.instances[inst_id]
        inst.attached = False
        self.leaving.discard(inst_id)
        if inst.slot is not None and self.fleet.slots[inst.slot] == inst_id:
            self.fleet.slots[inst.slot] = None
        if inst.state is not InstanceState.TERMINATED:
            inst.transition(InstanceState.TERMINATED, self.engine.now)
        self.log.append((self.engine.now, "released", inst_id))

    def rescale_finished(self, req) -> None:
        self.rescales_in_flight -= 1
        self.log.append((self.engine.now, "rescale-done"))
        self._poke()


class FixedCostExecutor:
    """Stand-in rescale executor with fixed phase durations and FIFO serialisation.

    Used to exercise :class:`CloudManager` without a workload attached.
    """

    def __init__(self, engine: Engine, evacuate: float = 2.0, rest: float = 10.0):
        self.engine = engine
        self.evacuate = evacuate
        self.rest = rest
        self.manager: Optional[CloudManager] = None
        self.queue: list = []
        self.busy = False
        self.started: list = []  # (start, end, request)

    def submit(self, build) -> None:
        self.queue.append(build)
        if not self.busy:
            self._next()

    def _next(self) -> None:
        while self.queue and not self.busy:
            build = self.queue.pop(0)
            req = build()
            if req is None:
                continue
            self.busy = True
            now = self.engine.now
            self.started.append([now, None, req])
            self.engine.schedule_in(self.evacuate, "rescale-phase-done:checkpoint",
                                    self._evacuated, req)

    def _evacuated(self, req) -> None:
        self.manager.on_evacuated(req.remove, self.engine.now)
        self.engine.schedule_in(self.rest, "rescale-phase-done:restart", self._done, req)

    def _done(self, req) -> None:
        for i in sorted(req.remove):
            self.manager.on_released(i)
        self.started[-1][1] = self.engine.now
        self.busy = False
        self.manager.rescale_finished(req)
        self._next()

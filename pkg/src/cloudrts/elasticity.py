"""Checkpoint/restore and the shrink / expand / replace rescale protocol.

A rescale is a generator of ``(event_tag, duration)`` steps. The caller
schedules each step on the engine and resumes the generator when the step's
event fires, so state changes happen at the simulated time they belong to.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional

from .loadbalance import LBInput, greedy_assign, greedy_refine
from .machine import CheckpointMode, ConfigError, InstanceProfile, TimingModel, \
    checkpoint_time, restart_time
from .runtime import Runtime, RuntimeFault
from .workload import HEADER_BYTES, ChareId


class RescaleError(RuntimeError):
    """A rescale that cannot be carried out (bad request or not enough capacity)."""


@dataclass(frozen=True)
class RescaleRequest:
    remove: frozenset = frozenset()
    add: frozenset = frozenset()
    mode: CheckpointMode = CheckpointMode.IN_MEMORY

    def __post_init__(self):
        object.__setattr__(self, "remove", frozenset(self.remove))
        object.__setattr__(self, "add", frozenset(self.add))
        if self.remove & self.add:
            raise RescaleError(f"instances {sorted(self.remove & self.add)} both removed and added")
        if not self.remove and not self.add:
            raise RescaleError("rescale request removes and adds nothing")

    @property
    def kind(self) -> str:
        if self.remove and self.add:
            return "replace"
        return "shrink" if self.remove else "expand"


@dataclass
class PhaseTimings:
    checkpoint: float = 0.0
    load_balance: float = 0.0
    restart: float = 0.0
    restore: float = 0.0

    @property
    def total(self) -> float:
        return self.checkpoint + self.load_balance + self.restart + self.restore


@dataclass
class CheckpointImage:
    mode: CheckpointMode
    host: dict = field(default_factory=dict)     # instance -> {ChareId: state}
    device: dict = field(default_factory=dict)   # instance -> {ChareId: state}, daemon-held
    host_bytes: dict = field(default_factory=dict)
    device_bytes: dict = field(default_factory=dict)

    def chare_ids(self) -> list:
        ids = []
        for part in (self.host, self.device):
            for states in part.values():
                ids.extend(states)
        return sorted(ids)


class DaemonRegistry:
    """Which instances run a live device checkpoint daemon."""

    def __init__(self):
        self.live: dict[int, float] = {}

    def launch(self, instance_id: int, profile: InstanceProfile, at: float) -> None:
        daemon_lifecycle(self, instance_id, profile, at)

    def stop(self, instance_id: int) -> None:
        self.live.pop(instance_id, None)

    def is_live(self, instance_id: int) -> bool:
        return instance_id in self.live


def daemon_lifecycle(registry: DaemonRegistry, instance_id: int, profile: InstanceProfile,
                     at: float = 0.0) -> None:
    """Mark the device daemon of ``instance_id`` live at time ``at``."""
    if not profile.has_device:
        raise ConfigError(f"instance {instance_id} ({profile.name}) has no device for a daemon")
    registry.live[instance_id] = at


def _split_state(chare, state: dict):
    """Bytes of a chare that sit on the device vs. the host."""
    if chare.device_resident:
        return HEADER_BYTES, chare.state_bytes - HEADER_BYTES
    return chare.state_bytes, 0


def checkpoint(rt: Runtime, mode: CheckpointMode) -> CheckpointImage:
    """Capture every chare bitwise. Requires a barrier (nothing running or in flight)."""
    if any(pe.running is not None for pe in rt.pes.values()) or rt.in_transit \
            or rt.messages_in_flight:
        raise RuntimeFault("checkpoint outside a quiescent point")
    img = CheckpointImage(mode)
    for inst in sorted(rt.instances):
        prof = rt.instances[inst]
        if mode is CheckpointMode.DAEMON and not prof.has_device:
            raise ConfigError(f"daemon checkpointing on CPU-only instance {inst} ({prof.name})")
        img.host[inst], img.device[inst] = {}, {}
        img.host_bytes[inst] = img.device_bytes[inst] = 0.0
        for pe_id in rt.instance_pes[inst]:
            for cid in sorted(rt.pes[pe_id].resident):
                chare = rt.chares[cid]
                state = chare.snapshot()
                h, d = _split_state(chare, state)
                if mode is CheckpointMode.DAEMON and chare.device_resident:
                    img.device[inst][cid] = state
                    img.host_bytes[inst] += h
                    img.device_bytes[inst] += d
                else:
                    img.host[inst][cid] = state
                    img.host_bytes[inst] += h + d
    return img


def restore(rt: Runtime, img: CheckpointImage, daemons: Optional[DaemonRegistry] = None) -> None:
    """Load every chare's state back from ``img``."""
    expected = sorted(rt.chares)
    if img.chare_ids() != expected:
        raise RuntimeFault("checkpoint image does not hold exactly the live chares")
    for inst, states in img.device.items():
        if states and (daemons is None or not daemons.is_live(inst)):
            raise RuntimeFault(f"restoring device data on instance {inst} without a live daemon")
    for part in (img.host, img.device):
        for states in part.values():
            for cid, state in states.items():
                rt.chares[cid].load(state)


def transfer_time(rt: Runtime, mode: CheckpointMode, tm: TimingModel,
                  host_bytes: Mapping[int, float], device_bytes: Mapping[int, float]) -> float:
    """Duration of writing or reading one image spread over ``host_bytes`` instances."""
    insts = sorted(host_bytes)
    if not insts:
        return 0.0
    if mode is CheckpointMode.SHARED_FS:
        total = sum(host_bytes.values()) + sum(device_bytes.values())
        return total / tm.fs_bandwidth
    return max(checkpoint_time(host_bytes[i], 1, mode, _profile(rt, i), tm, device_bytes.get(i, 0.0))
               for i in insts)


def _profile(rt: Runtime, inst: int) -> InstanceProfile:
    return rt.instances[inst]


def image_bytes_by_instance(rt: Runtime, img: CheckpointImage):
    """Per-instance byte counts of ``img`` under the runtime's current placement."""
    host = {i: 0.0 for i in rt.instances}
    dev = {i: 0.0 for i in rt.instances}
    by_cid = {}
    for part, is_dev in ((img.host, False), (img.device, True)):
        for states in part.values():
            for cid in states:
                by_cid[cid] = is_dev
    for cid, is_dev in by_cid.items():
        chare = rt.chares[cid]
        inst = rt.pes[rt.pe_of(cid)].instance_id
        h, d = _split_state(chare, None)
        if is_dev:
            host[inst] += h
            dev[inst] += d
        else:
            host[inst] += h + d
    return host, dev


def chare_loads(rt: Runtime) -> dict:
    """Average work per iteration of each chare over the current stats window."""
    out = {}
    for cid in sorted(rt.chares):
        n = rt.chare_iters[cid]
        out[cid] = rt.chare_work[cid] / n if n else rt.chares[cid].work_per_iter
    return out


def pe_rates(rt: Runtime) -> dict:
    return {pe: rt.rate_estimate(pe) for pe in sorted(rt.pes)}


class Rescaler:
    """Runs one :class:`RescaleRequest` against a runtime as a step generator."""

    def __init__(self, rt: Runtime, timing: TimingModel, daemons: DaemonRegistry,
                 profiles: Mapping[int, InstanceProfile],
                 on_evacuated: Optional[Callable[[frozenset, float], None]] = None,
                 on_released: Optional[Callable[[int], None]] = None):
        self.rt = rt
        self.timing = timing
        self.daemons = daemons
        self.profiles = profiles
        self.on_evacuated = on_evacuated
        self.on_released = on_released

    def check_capacity(self, req: RescaleRequest) -> None:
        rt = self.rt
        missing = [i for i in req.remove if i not in rt.instances]
        if missing:
            raise RescaleError(f"cannot remove instances {sorted(missing)}: not attached")
        clash = [i for i in req.add if i in rt.instances]
        if clash:
            raise RescaleError(f"cannot add instances {sorted(clash)}: already attached")
        survivors = [i for i in rt.instances if i not in req.remove]
        if not survivors:
            raise RescaleError(
                f"shrink would remove every instance ({sorted(req.remove)}); no capacity left")
        if req.mode is CheckpointMode.DAEMON:
            for i in sorted(set(rt.instances) | set(req.add)):
                prof = rt.instances.get(i) or self.profiles[i]
                if not prof.has_device:
                    raise ConfigError(f"daemon mode on CPU-only instance {i} ({prof.name})")
        caps = [rt.instances[i].mem_capacity for i in survivors]
        if any(c is None for c in caps):
            return  # at least one survivor is unbounded
        total = sum(c.state_bytes for c in rt.chares.values())
        cap = sum(caps)
        if total > cap:
            raise RescaleError(
                f"surviving instances hold {cap:.0f} bytes but the application needs {total:.0f}")

    def evacuation_moves(self, remove) -> list:
        rt = self.rt
        dying = {pe for i in remove for pe in rt.instance_pes[i]}
        loads = chare_loads(rt)
        rates = {pe: r for pe, r in pe_rates(rt).items() if pe not in dying}
        fixed = {cid: rt.pe_of(cid) for cid in rt.chares if rt.pe_of(cid) not in dying}
        dest = greedy_assign(loads, rates, fixed)
        return [(cid, dest[cid]) for cid in sorted(dest)]

    def steps(self, req: RescaleRequest, timings: PhaseTimings) -> Iterator[tuple[str, float]]:
        rt, tm, mode = self.rt, self.timing, req.mode
        self.check_capacity(req)
        before = sorted(rt.chares)

        if req.remove and mode is not CheckpointMode.SHARED_FS:
            d = rt.migrate_batch(self.evacuation_moves(req.remove))
            timings.load_balance += d
            yield "rescale-phase-done:migrate-off", d

        img = checkpoint(rt, mode)
        if mode is CheckpointMode.SHARED_FS:
            d = transfer_time(rt, mode, tm, img.host_bytes, img.device_bytes)
        else:
            live = [i for i in rt.instances if i not in req.remove]
            d = transfer_time(rt, mode, tm, {i: img.host_bytes[i] for i in live},
                              {i: img.device_bytes[i] for i in live})
        timings.checkpoint += d
        yield "rescale-phase-done:checkpoint", d
        if self.on_evacuated and req.remove:
            self.on_evacuated(req.remove, rt.engine.now)

        # restart: the old processes go away and the job comes back on the new set
        if req.remove and mode is CheckpointMode.SHARED_FS:
            for cid, pe in self.evacuation_moves(req.remove):
                rt.place(cid, pe)
        for i in sorted(req.remove):
            rt.remove_instance(i)
            self.daemons.stop(i)
            if self.on_released:
                self.on_released(i)
        for i in sorted(req.add):
            rt.add_instance(i, self.profiles[i])
        restart = restart_time(len(rt.instances), tm)
        if mode is CheckpointMode.DAEMON and req.add:
            timings.restart += tm.daemon_startup
            first = True
            for i in sorted(req.add):
                self.daemons.launch(i, self.profiles[i], rt.engine.now + tm.daemon_startup)
                yield f"daemon-up:{i}", (tm.daemon_startup if first else 0.0)
                first = False
        timings.restart += restart
        yield "rescale-phase-done:restart", restart
        rt.loc.rebuild(rt.pes)

        if req.add and mode is CheckpointMode.SHARED_FS:
            # Reading back from the shared store lands chares anywhere for free.
            plan = greedy_refine(LBInput(chare_loads(rt), {c: rt.pe_of(c) for c in rt.chares},
                                         pe_rates(rt)))
            for cid, _, dst in plan.moves:
                rt.place(cid, dst)
            rt.loc.rebuild(rt.pes)
        restore(rt, img, self.daemons)
        host, dev = image_bytes_by_instance(rt, img)
        if mode is CheckpointMode.SHARED_FS:
            d = transfer_time(rt, mode, tm, host, dev)
        else:
            d = transfer_time(rt, mode, tm, {i: v for i, v in host.items() if v or dev[i]},
                              {i: v for i, v in dev.items() if v or host[i]})
        timings.restore += d
        yield "rescale-phase-done:restore", d

        if req.add and mode is not CheckpointMode.SHARED_FS:
            plan = greedy_refine(LBInput(chare_loads(rt), {c: rt.pe_of(c) for c in rt.chares},
                                         pe_rates(rt)))
            d = rt.migrate_batch([(cid, dst) for cid, _, dst in plan.moves])
            timings.load_balance += d
            yield "rescale-phase-done:load-balance", d

        if sorted(rt.chares) != before:
            raise RuntimeFault("rescale lost or duplicated chares")
        rt.check_residency()
        rt.reset_stats()


def run_rescale_now(rescaler: Rescaler, req: RescaleRequest) -> PhaseTimings:
    """Drive a rescale to completion on the rescaler's engine; returns its timings."""
    timings = PhaseTimings()
    eng = rescaler.rt.engine
    gen = rescaler.steps(req, timings)
    done = []

    def advance():
        try:
            tag, dt = next(gen)
        except StopIteration:
            done.append(True)
            return
        eng.schedule_in(dt, tag, advance)

    advance()
    while not done:
        if eng.step() is None:
            raise RuntimeFault("engine ran dry in the middle of a rescale")
    return timings

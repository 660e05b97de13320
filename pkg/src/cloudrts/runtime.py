"""Message-driven runtime with migratable chares.

Each PE runs one chare at a time from a FIFO of chares whose halos for the
current iteration have all arrived, so a chare waiting on the network never
blocks a ready sibling. Chares send their edges at the *start* of an
iteration; a barrier pause therefore stops every chare at the same iteration
with nothing in flight, which is what checkpoints and load balancing need.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .machine import (InstanceProfile, NetworkModel, TimingModel, compute_time,
                      message_time, migration_time)
from .simkernel import Engine
from .workload import ChareId

log = logging.getLogger(__name__)


class RuntimeFault(RuntimeError):
    """Broken runtime invariant (a scheduling bug, never a user error)."""


@dataclass
class PEState:
    pe_id: int
    instance_id: int
    rate: float
    ready_queue: deque = field(default_factory=deque)
    resident: dict = field(default_factory=dict)  # ordered set of ChareId
    busy_until: float = 0.0
    running: Optional[ChareId] = None
    busy_time: float = 0.0
    work_done: float = 0.0
    # messages that reached this PE before the chare they target arrived
    held: dict = field(default_factory=dict)


@dataclass
class LoadRecord:
    chare: ChareId
    measured_work: float
    pe: int
    pe_rate_estimate: float


@dataclass
class Message:
    msg_id: int
    dst: ChareId
    nbytes: float
    payload: object
    sender_pe: Optional[int]
    hops: int = 0
    cost: float = 0.0


class LocationManager:
    """Authoritative homes, per-PE location caches, and forwarding entries."""

    def __init__(self):
        self.home: dict[ChareId, int] = {}
        self.forward: dict[int, dict[ChareId, int]] = {}
        self.cache: dict[int, dict[ChareId, int]] = {}

    def register(self, cid: ChareId, pe: int) -> None:
        self.home[cid] = pe

    def lookup(self, sender_pe: Optional[int], cid: ChareId) -> int:
        if cid not in self.home:
            raise RuntimeFault(f"unknown chare {cid}")
        if sender_pe is None:
            return self.home[cid]
        return self.cache.setdefault(sender_pe, {}).get(cid, self.home[cid])

    def refresh(self, sender_pe: Optional[int], cid: ChareId) -> None:
        if sender_pe is not None:
            self.cache.setdefault(sender_pe, {})[cid] = self.home[cid]

    def moved(self, cid: ChareId, src: int, dst: int) -> None:
        self.home[cid] = dst
        self.forward.setdefault(src, {})[cid] = dst
        self.forward.get(dst, {}).pop(cid, None)

    def next_hop(self, pe: int, cid: ChareId) -> Optional[int]:
        return self.forward.get(pe, {}).get(cid)

    def rebuild(self, pes) -> None:
        """Fresh caches everywhere; used after a restart."""
        self.forward = {}
        self.cache = {pe: dict(self.home) for pe in pes}

    def chain_length(self, pe: int, cid: ChareId) -> int:
        n, seen = 0, set()
        while pe != self.home[cid]:
            if pe in seen:
                raise RuntimeFault(f"forwarding cycle for {cid}")
            seen.add(pe)
            nxt = self.next_hop(pe, cid)
            if nxt is None:
                raise RuntimeFault(f"broken forwarding chain for {cid} at PE {pe}")
            pe, n = nxt, n + 1
        return n


class Runtime:
    """Chares, PEs and the message/compute event handlers that drive them."""

    def __init__(self, engine: Engine, net: NetworkModel, timing: TimingModel,
                 iterations: int = 0, task_overhead: float = 5e-6,
                 message_overhead: float = 1e-6):
        self.engine = engine
        self.net = net
        self.timing = timing
        self.iterations = iterations
        self.task_overhead = task_overhead
        self.message_overhead = message_overhead
        self.instances: dict[int, InstanceProfile] = {}
        self.instance_pes: dict[int, list[int]] = {}
        self.pes: dict[int, PEState] = {}
        self.chares: dict[ChareId, object] = {}
        self.loc = LocationManager()
        self._next_pe = 0
        self._next_msg = 0
        self._inflight: dict[int, int] = {}  # sending instance -> messages on its link
        self.messages_in_flight = 0
        self.in_transit: dict[ChareId, int] = {}  # chare -> destination PE
        self.delivered: set[int] = set()
        self.pause_target: Optional[int] = None
        self._on_quiescent: Optional[Callable[[], None]] = None
        self._queued: set[ChareId] = set()
        self._done_count: dict[int, int] = {}
        self.iteration_done_at: dict[int, float] = {}
        self.on_iteration_done: Optional[Callable[[int, float], None]] = None
        self.on_complete: Optional[Callable[[float], None]] = None
        self.chare_work: dict[ChareId, float] = {}
        self.chare_iters: dict[ChareId, int] = {}
        self.message_log: list[tuple] = []
        self.log_messages = False
        self.started = False

    # ------------------------------------------------------------------ setup

    def add_instance(self, instance_id: int, profile: InstanceProfile) -> list[int]:
        if instance_id in self.instances:
            raise RuntimeFault(f"instance {instance_id} already attached")
        self.instances[instance_id] = profile
        ids = []
        for _ in range(profile.pes_per_instance):
            pe = PEState(self._next_pe, instance_id, profile.pe_rate)
            self.pes[pe.pe_id] = pe
            self.loc.cache[pe.pe_id] = dict(self.loc.home)
            ids.append(pe.pe_id)
            self._next_pe += 1
        self.instance_pes[instance_id] = ids
        return ids

    def remove_instance(self, instance_id: int) -> None:
        for pe_id in self.instance_pes.get(instance_id, []):
            pe = self.pes[pe_id]
            if pe.resident or pe.running is not None or pe.held:
                raise RuntimeFault(
                    f"removing instance {instance_id}: PE {pe_id} still hosts chares")
        for pe_id in self.instance_pes.pop(instance_id):
            del self.pes[pe_id]
            self.loc.cache.pop(pe_id, None)
            self.loc.forward.pop(pe_id, None)
        del self.instances[instance_id]
        self._inflight.pop(instance_id, None)

    def add_chare(self, chare, pe_id: int) -> None:
        if chare.cid in self.chares:
            raise RuntimeFault(f"duplicate chare {chare.cid}")
        self.chares[chare.cid] = chare
        self.pes[pe_id].resident[chare.cid] = None
        self.loc.register(chare.cid, pe_id)
        for cache in self.loc.cache.values():
            cache.setdefault(chare.cid, pe_id)
        self.chare_work.setdefault(chare.cid, 0.0)
        self.chare_iters.setdefault(chare.cid, 0)

    def place(self, cid: ChareId, pe_id: int) -> None:
        """Move a chare without cost (only valid while restoring from a checkpoint)."""
        src = self.loc.home[cid]
        if src == pe_id:
            return
        self.pes[src].resident.pop(cid)
        self.pes[pe_id].resident[cid] = None
        self.loc.home[cid] = pe_id

    def pe_of(self, cid: ChareId) -> int:
        return self.loc.home[cid]

    def instance_of_pe(self, pe_id: int) -> int:
        return self.pes[pe_id].instance_id

    def profile_of_pe(self, pe_id: int) -> InstanceProfile:
        return self.instances[self.pes[pe_id].instance_id]

    def start(self) -> None:
        self.started = True
        for cid in sorted(self.chares):
            self._begin_iteration(self.chares[cid])

    # ------------------------------------------------------------ messaging

    def _path(self, src_pe: Optional[int], dst_pe: int) -> NetworkModel:
        dst_inst = self.pes[dst_pe].instance_id
        if src_pe is not None and self.pes[src_pe].instance_id == dst_inst:
            return self.net.node_local(self.instances[dst_inst].host_mem_bw)
        return self.net

    def _transfer(self, src_pe: Optional[int], dst_pe: int, nbytes: float) -> tuple[float, Optional[int]]:
        path = self._path(src_pe, dst_pe)
        link = None
        concurrent = 1
        if path is self.net and src_pe is not None:
            link = self.pes[src_pe].instance_id
            concurrent = self._inflight.get(link, 0) + 1
            self._inflight[link] = concurrent
        return message_time(nbytes, path, concurrent), link

    def deliver(self, dst: ChareId, nbytes: float, payload=None,
                sender_pe: Optional[int] = None) -> Message:
        """Send a message to a chare wherever it lives; arrives exactly once."""
        if dst not in self.chares:
            raise RuntimeFault(f"message to unknown chare {dst}")
        msg = Message(self._next_msg, dst, nbytes, payload, sender_pe)
        self._next_msg += 1
        target = self.loc.lookup(sender_pe, dst)
        self._send_hop(msg, sender_pe, target)
        return msg

    def _send_hop(self, msg: Message, from_pe: Optional[int], to_pe: int) -> None:
        dt, link = self._transfer(from_pe, to_pe, msg.nbytes)
        msg.cost += dt
        msg.hops += 1
        self.messages_in_flight += 1
        self.engine.schedule_in(dt, "message-arrival", self._arrive, msg, to_pe, link)

    def _arrive(self, msg: Message, pe_id: int, link: Optional[int]) -> None:
        self.messages_in_flight -= 1
        if link is not None and link in self._inflight:
            self._inflight[link] -= 1
        pe = self.pes.get(pe_id)
        if pe is None:
            raise RuntimeFault(f"message {msg.msg_id} arrived at a removed PE {pe_id}")
        cid = msg.dst
        if cid in pe.resident and cid not in self.in_transit:
            self._consume(msg, pe)
            self._check_quiescent()
            return
        if self.in_transit.get(cid) == pe_id:
            pe.held.setdefault(cid, []).append(msg)
            return
        nxt = self.loc.next_hop(pe_id, cid)
        if nxt is None:
            raise RuntimeFault(f"message {msg.msg_id} for {cid} lost at PE {pe_id}")
        self.loc.refresh(msg.sender_pe, cid)
        self._send_hop(msg, pe_id, nxt)

    def _consume(self, msg: Message, pe: PEState) -> None:
        if msg.msg_id in self.delivered:
            raise RuntimeFault(f"message {msg.msg_id} delivered twice")
        self.delivered.add(msg.msg_id)
        if self.log_messages:
            self.message_log.append((self.engine.now, msg.msg_id, msg.dst, pe.pe_id, msg.hops))
        if msg.payload is None:
            return
        iteration, direction, edge = msg.payload
        chare = self.chares[msg.dst]
        chare.receive(iteration, direction, edge)
        self._maybe_ready(chare)

    # ------------------------------------------------------------- execution

    def _begin_iteration(self, chare) -> None:
        if chare.iteration >= self.iterations:
            return
        if self.pause_target is not None and chare.iteration >= self.pause_target:
            return
        src = self.loc.home[chare.cid]
        for nbr, direction, edge, nbytes in chare.outgoing():
            self.deliver(nbr, nbytes, (chare.iteration, direction, edge), src)
        self._maybe_ready(chare)

    def _maybe_ready(self, chare) -> None:
        cid = chare.cid
        if cid in self._queued or cid in self.in_transit:
            return
        if chare.iteration >= self.iterations:
            return
        if self.pause_target is not None and chare.iteration >= self.pause_target:
            return
        if not chare.halos_complete():
            return
        pe = self.pes[self.loc.home[cid]]
        if pe.running == cid:
            return
        self._queued.add(cid)
        pe.ready_queue.append(cid)
        if pe.running is None:
            self.schedule_next(pe)

    def schedule_next(self, pe: PEState) -> Optional[ChareId]:
        """Start the head of the ready queue; ``None`` means the PE idles."""
        if pe.running is not None:
            raise RuntimeFault(f"PE {pe.pe_id} is mid-task")
        while pe.ready_queue:
            cid = pe.ready_queue.popleft()
            self._queued.discard(cid)
            chare = self.chares[cid]
            if self.pause_target is not None and chare.iteration >= self.pause_target:
                continue
            sends = chare.expected_halos if chare.iteration + 1 < self.iterations else 0
            rate = pe.rate
            dur = (self.task_overhead + compute_time(chare.work_per_iter, rate)
                   + sends * self.message_overhead)
            pe.running = cid
            pe.busy_until = self.engine.now + dur
            self.engine.schedule_in(dur, "compute-done", self._compute_done, pe.pe_id, cid, dur)
            return cid
        return None

    def _compute_done(self, pe_id: int, cid: ChareId, dur: float) -> None:
        pe = self.pes[pe_id]
        chare = self.chares[cid]
        it = chare.iteration
        chare.step()
        pe.running = None
        pe.busy_time += dur
        pe.work_done += chare.work_per_iter
        self.chare_work[cid] += chare.work_per_iter
        self.chare_iters[cid] += 1
        n = self._done_count.get(it, 0) + 1
        self._done_count[it] = n
        if n == len(self.chares):
            self.iteration_done_at[it] = self.engine.now
            del self._done_count[it]
            if self.on_iteration_done:
                self.on_iteration_done(it, self.engine.now)
        self._begin_iteration(chare)
        if pe.running is None:
            self.schedule_next(pe)
        if self.is_complete():
            if self.on_complete:
                self.on_complete(self.engine.now)
        self._check_quiescent()

    def is_complete(self) -> bool:
        return self.started and all(c.iteration >= self.iterations for c in self.chares.values())

    # ---------------------------------------------------------------- barrier

    def pause(self, on_quiescent: Callable[[], None]) -> int:
        """Stop every chare at the next common iteration; call back once idle."""
        if self._on_quiescent is not None:
            raise RuntimeFault("a barrier is already pending")
        top = 0
        for cid, c in self.chares.items():
            running = any(pe.running == cid for pe in self.pes.values())
            top = max(top, c.iteration + (1 if running else 0))
        self.pause_target = min(top + 1, self.iterations)
        self._on_quiescent = on_quiescent
        self._check_quiescent()
        return self.pause_target

    def is_quiescent(self) -> bool:
        if any(pe.running is not None for pe in self.pes.values()):
            return False
        if self.in_transit or self.messages_in_flight:
            return False
        target = self.pause_target if self.pause_target is not None else self.iterations
        return all(c.iteration == target for c in self.chares.values())

    def _check_quiescent(self) -> None:
        if self._on_quiescent is not None and self.is_quiescent():
            cb, self._on_quiescent = self._on_quiescent, None
            for c in self.chares.values():
                if c.halos:
                    raise RuntimeFault(f"{c.cid} holds halos at a barrier")
            cb()

    def resume(self) -> None:
        self.pause_target = None
        for cid in sorted(self.chares):
            self._begin_iteration(self.chares[cid])

    # -------------------------------------------------------------- migration

    def migrate(self, cid: ChareId, dst_pe: int, start: Optional[float] = None) -> float:
        """Ship a quiescent chare to ``dst_pe``; returns the completion time."""
        if dst_pe not in self.pes:
            raise RuntimeFault(f"migration of {cid} to unknown or terminated PE {dst_pe}")
        src_pe = self.loc.home[cid]
        if self.pes[src_pe].running == cid or cid in self._queued:
            raise RuntimeFault(f"{cid} is not quiescent")
        if cid in self.in_transit:
            raise RuntimeFault(f"{cid} is already migrating")
        chare = self.chares[cid]
        t0 = self.engine.now if start is None else start
        if src_pe == dst_pe:
            return t0
        src_inst = self.pes[src_pe].instance_id
        dst_inst = self.pes[dst_pe].instance_id
        if src_inst == dst_inst:
            path = self.net.node_local(self.instances[src_inst].host_mem_bw)
            dt = message_time(chare.state_bytes, path, 1)
        else:
            rdma = all((self.instances[i].device is not None and self.instances[i].device.rdma)
                       for i in (src_inst, dst_inst))
            dt = migration_time(chare.state_bytes, self.net, self.timing,
                                chare.device_resident, rdma)
        done = t0 + dt
        self.pes[src_pe].resident.pop(cid)
        self.pes[dst_pe].resident[cid] = None
        self.loc.moved(cid, src_pe, dst_pe)
        self.in_transit[cid] = dst_pe
        self.engine.schedule_at(done, "migration-done", self._migration_done, cid, dst_pe)
        return done

    def _migration_done(self, cid: ChareId, dst_pe: int) -> None:
        if self.in_transit.get(cid) != dst_pe:
            raise RuntimeFault(f"unexpected migration completion for {cid}")
        del self.in_transit[cid]
        pe = self.pes[dst_pe]
        for msg in pe.held.pop(cid, []):
            self._consume(msg, pe)
        self._maybe_ready(self.chares[cid])
        self._check_quiescent()

    def migrate_batch(self, moves) -> float:
        """Run ``(cid, dst_pe)`` moves, serialised per source instance; returns the duration."""
        now = self.engine.now
        nic_free: dict[int, float] = {}
        finish = now
        for cid, dst in moves:
            src_inst = self.pes[self.loc.home[cid]].instance_id
            start = nic_free.get(src_inst, now)
            done = self.migrate(cid, dst, start)
            nic_free[src_inst] = done
            finish = max(finish, done)
        return finish - now

    # ------------------------------------------------------------------ stats

    def collect_stats(self) -> list[LoadRecord]:
        """Per-chare work and per-PE rates since the last :meth:`reset_stats`."""
        out = []
        for cid in sorted(self.chares):
            if self.chare_iters[cid] == 0:
                continue
            pe = self.pes[self.loc.home[cid]]
            out.append(LoadRecord(cid, self.chare_work[cid], pe.pe_id, self.rate_estimate(pe.pe_id)))
        return out

    def rate_estimate(self, pe_id: int) -> float:
        pe = self.pes[pe_id]
        if pe.busy_time > 0 and pe.work_done > 0:
            return pe.work_done / pe.busy_time
        return pe.rate

    def reset_stats(self) -> None:
        for cid in self.chare_work:
            self.chare_work[cid] = 0.0
            self.chare_iters[cid] = 0
        for pe in self.pes.values():
            pe.busy_time = 0.0
            pe.work_done = 0.0

    def check_residency(self) -> None:
        seen: dict[ChareId, int] = {}
        for pe in self.pes.values():
            for cid in pe.resident:
                if cid in seen:
                    raise RuntimeFault(f"{cid} resident on PEs {seen[cid]} and {pe.pe_id}")
                seen[cid] = pe.pe_id
        if set(seen) != set(self.chares):
            raise RuntimeFault("some chares have no home PE")
        for cid, pe in seen.items():
            if self.loc.home[cid] != pe:
                raise RuntimeFault(f"location manager disagrees about {cid}")

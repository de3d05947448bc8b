"""Partition server: serves reads, participates in 2PC, feeds replication."""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from . import stabilisation
from .store import ObjectVersion, Protocol, Store
from .timebase import SiteClock, vv_leq

CLOCK_SKEW = "clock-skew"
PENDING_COMMIT = "pending-commit"


@dataclass
class Prepared:
    txn: int
    upds: list
    dep: tuple
    time: int


@dataclass
class BlockedRead:
    tc: object
    txn: int
    keys: list
    ss: tuple
    arrived: int
    causes: List[str] = field(default_factory=list)


class PrepareSink:
    """Hook for persisting prepare records; the default keeps nothing."""

    def write(self, site: int, part: int, record: Prepared) -> None:
        pass


class PartitionServer:
    def __init__(
        self,
        net,
        site: int,
        part: int,
        m: int,
        n_parts: int,
        protocol: Protocol,
        clock: SiteClock,
        max_versions: int = 50,
        keep_versions: int = 20,
        heartbeat_with_updates: bool = True,
        sink: Optional[PrepareSink] = None,
    ):
        self.net = net
        self.site = site
        self.part = part
        self.m = m
        self.n_parts = n_parts
        self.protocol = Protocol.parse(protocol)
        self.clock = clock
        self.store = Store(m, self.protocol, max_versions, keep_versions)
        self.prepared: Dict[int, Prepared] = {}
        self.to_send: List[Tuple] = []  # (ct, txn, upds, dep), ct ascending
        self.vec = [0] * m
        self.sv = [0] * m
        self.peer_vecs: Dict[int, tuple] = {}
        self.last_remote_ct = [0] * m
        self.blocked: List[BlockedRead] = []
        self.cure_hwm = 0
        self.heartbeat_with_updates = heartbeat_with_updates
        self.sink = sink or PrepareSink()
        self.sv_waiters: List[Tuple[tuple, Callable[[], None]]] = []
        self._wake_scheduled: Set[int] = set()

    @property
    def addr(self):
        return ("p", self.site, self.part)

    def __repr__(self):
        return f"p{self.site}.{self.part}"

    # -- reads -----------------------------------------------------------

    def handle_read(self, tc, txn: int, keys, ss) -> None:
        ss = tuple(ss)
        if self.protocol is Protocol.CURE:
            req = BlockedRead(tc, txn, list(keys), ss, self.net.now)
            if self._cure_blocker(req) is not None:
                self.blocked.append(req)
                self._schedule_clock_wake(req)
                return
            self._serve(req)
            return
        self._reply(tc, txn, keys, ss, wait=0, causes=[])

    def _cure_blocker(self, req: BlockedRead) -> Optional[str]:
        local = req.ss[self.site]
        if self.clock.read() < local:
            cause = CLOCK_SKEW
        elif any(p.time <= local for p in self.prepared.values()):
            cause = PENDING_COMMIT
        else:
            return None
        if cause not in req.causes:
            req.causes.append(cause)
        return cause

    def _schedule_clock_wake(self, req: BlockedRead) -> None:
        # Jitter can leave peek() ahead of read(); retry next tick then.
        gap = max(1, req.ss[self.site] - self.clock.peek())
        at = self.net.now + gap
        if at in self._wake_scheduled:
            return
        self._wake_scheduled.add(at)
        self.net.schedule(gap, self._clock_wake, at)

    def _clock_wake(self, at: int) -> None:
        self._wake_scheduled.discard(at)
        self.wake_blocked()

    def wake_blocked(self) -> None:
        if not self.blocked:
            return
        still = []
        # FIFO among reads that unblock together.
        for req in self.blocked:
            if self._cure_blocker(req) is None:
                self._serve(req)
            else:
                still.append(req)
                if req.causes[-1] == CLOCK_SKEW:
                    self._schedule_clock_wake(req)
        self.blocked = still

    def _serve(self, req: BlockedRead) -> None:
        local = req.ss[self.site]
        if local > self.cure_hwm:
            self.cure_hwm = local
        self._reply(req.tc, req.txn, req.keys, req.ss, self.net.now - req.arrived, req.causes)

    def _reply(self, tc, txn, keys, ss, wait, causes) -> None:
        results = []
        skips = []
        for k in keys:
            v, skipped = self.store.read_with_skips(k, ss)
            results.append(v)
            skips.append(skipped)
        self.net.log(
            "read-resp", txn=txn, site=self.site, part=self.part,
            versions=[[v.key, v.txn] for v in results], skips=skips,
            wait=wait, causes=list(causes),
        )
        self.net.reply(self, tc, "on_read_resp", self.part, results, wait)

    # -- 2PC -------------------------------------------------------------

    def proposal_floor(self) -> int:
        # Proposals must exceed every stable time already announced and
        # every Cure snapshot already served; ticks can share a sim instant.
        return max(self.vec[self.site], self.cure_hwm)

    def propose(self, ct: int) -> int:
        if self.protocol is Protocol.CV:
            return ct
        return max(self.clock.read(), ct, self.proposal_floor() + 1)

    def handle_prepare(self, tc, txn: int, upds, dep, ct: int, collapse: bool = False) -> None:
        rec = self.prepared.get(txn)
        if rec is None:
            rec = Prepared(txn, list(upds), tuple(dep), self.propose(ct))
            self.prepared[txn] = rec
            self.sink.write(self.site, self.part, rec)
            self.net.log(
                "prepare", txn=txn, site=self.site, part=self.part,
                keys=sorted({k for k, _ in upds}), time=rec.time, collapsed=collapse,
            )
        if collapse:
            final = ct if self.protocol is Protocol.CV else max(ct, rec.time)
            self.handle_commit(txn, final)
            self.net.reply(self, tc, "on_prepared", self.part, rec.time, final)
        else:
            self.net.reply(self, tc, "on_prepared", self.part, rec.time, None)

    def handle_commit(self, txn: int, ct: int) -> None:
        rec = self.prepared.pop(txn, None)
        if rec is None:
            return
        installed, evicted = self.store.update_versions(
            rec.upds, rec.dep, ct, self.site, txn, local=True, pins=self.gc_pins()
        )
        bisect.insort(self.to_send, (ct, txn, rec.upds, rec.dep), key=lambda e: (e[0], e[1]))
        cv = list(rec.dep)
        cv[self.site] = ct
        self.net.log(
            "commit", txn=txn, site=self.site, part=self.part, ct=ct, dep=list(rec.dep),
            cv=cv, keys=sorted({k for k, _ in rec.upds}), installed=[v.key for v in installed],
        )
        self.log_evictions(evicted)
        self.wake_blocked()

    def handle_abort(self, txn: int) -> None:
        rec = self.prepared.pop(txn, None)
        if rec is None:
            return
        self.net.log("abort", txn=txn, site=self.site, part=self.part)
        self.wake_blocked()

    def gc_pins(self) -> List[tuple]:
        pins = [tuple(self.sv)]
        active = getattr(self.net, "active_snapshots", None)
        if active is not None:
            pins.extend(active(self.site))
        return pins

    def log_evictions(self, evicted: List[ObjectVersion]) -> None:
        if evicted:
            self.net.log(
                "gc", site=self.site, part=self.part,
                evicted=[[v.key, v.txn] for v in evicted],
            )

    # -- stabilisation ---------------------------------------------------

    def tick(self) -> int:
        return stabilisation.tick(self)

    def on_stable(self, from_part: int, vec) -> None:
        stabilisation.on_stable(self, from_part, vec)

    def on_remote_updates(self, from_site, txn, upds, dep, ct) -> None:
        stabilisation.on_remote_updates(self, from_site, txn, upds, dep, ct)

    def on_heartbeat(self, from_site, stable) -> None:
        stabilisation.on_heartbeat(self, from_site, stable)

    # -- stable-vector waiters (session catch-up) -------------------------

    def adopt_sv(self, target) -> bool:
        changed = False
        for i, x in enumerate(target):
            if x > self.sv[i]:
                self.sv[i] = x
                changed = True
        if changed:
            self.on_sv_change()
        return changed

    def wait_for_sv(self, target, callback: Callable[[], None]) -> None:
        if vv_leq(target, self.sv):
            callback()
        else:
            self.sv_waiters.append((tuple(target), callback))

    def on_sv_change(self) -> None:
        if not self.sv_waiters:
            return
        ready = [cb for t, cb in self.sv_waiters if vv_leq(t, self.sv)]
        self.sv_waiters = [(t, cb) for t, cb in self.sv_waiters if not vv_leq(t, self.sv)]
        for cb in ready:
            cb()

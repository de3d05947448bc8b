"""Transaction coordinator (TC) and client session state.

A TC is created on the server that receives a transaction's first request
and lives until the transaction commits or aborts.  It only talks to
partitions through the network object it is given.
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .store import ObjectVersion, Protocol, make_version, recency_less
from .timebase import VersionVector, vv_leq, vv_max, with_entry, zero


class PhaseError(RuntimeError):
    pass


class Phase(str, enum.Enum):
    ACTIVE = "active"
    PREPARING = "preparing"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass
class TxnRecord:
    txn: int
    protocol: Protocol
    site: int
    ss: VersionVector
    dep: VersionVector
    ws: List[Tuple[int, bytes]] = field(default_factory=list)
    ct: Optional[int] = None
    phase: Phase = Phase.ACTIVE

    @property
    def cv(self) -> Optional[VersionVector]:
        if self.ct is None:
            return None
        return with_entry(self.dep, self.site, self.ct)


@dataclass
class ClientSession:
    client: int
    m: int
    sticky_site: int = 0
    cache: Dict[int, ObjectVersion] = field(default_factory=dict)
    last_ss: Optional[VersionVector] = None
    last_site: Optional[int] = None

    def __post_init__(self):
        if self.last_ss is None:
            self.last_ss = zero(self.m)


class Partitioner:
    """Deterministic key placement shared by every site."""

    def __init__(self, n_parts: int, overrides: Optional[Mapping[int, int]] = None):
        self.n_parts = n_parts
        self.overrides = dict(overrides or {})

    def __call__(self, key) -> int:
        if key in self.overrides:
            return self.overrides[key]
        return zlib.crc32(str(key).encode()) % self.n_parts


def get_parts(keys: Sequence, partitioner) -> Dict[int, List]:
    if isinstance(partitioner, int):
        partitioner = Partitioner(partitioner)
    groups: Dict[int, List] = {}
    for k in keys:
        groups.setdefault(partitioner(k), []).append(k)
    return groups


def init(protocol, site: int, sv: Sequence[int], clock_value: Optional[int] = None, txn: int = 0) -> TxnRecord:
    protocol = Protocol.parse(protocol)
    sv = tuple(sv)
    if protocol is Protocol.CV:
        return TxnRecord(txn, protocol, site, zero(len(sv)), sv)
    if protocol is Protocol.CURE:
        local = sv[site] if clock_value is None else max(clock_value, sv[site])
        ss = with_entry(sv, site, local)
        return TxnRecord(txn, protocol, site, ss, ss)
    return TxnRecord(txn, protocol, site, sv, sv)


def initial_commit_time(dep: Sequence[int]) -> int:
    # One past every dependency entry keeps (ct, origin) recency consistent
    # with causal precedence across sites; it is >= dep[site] + 1.
    return max(dep) + 1


def final_commit_time(protocol: Protocol, ct: int, proposals: Sequence[int]) -> int:
    if protocol is Protocol.CV:
        return ct
    return max([ct, *proposals])


def fold_read_dep(t: TxnRecord, versions: Sequence[ObjectVersion]) -> None:
    if t.protocol in (Protocol.OP, Protocol.LATEST) and versions:
        dep = t.dep
        for v in versions:
            dep = vv_max(dep, v.cv)
        t.dep = dep


def update_objects(t: TxnRecord, pairs) -> None:
    if t.phase is not Phase.ACTIVE:
        raise PhaseError(f"txn {t.txn} is {t.phase.value}")
    t.ws.extend(pairs)


def session_finalize(s: ClientSession, t: Optional[TxnRecord], sv_now: Sequence[int]) -> None:
    sv_now = tuple(sv_now)
    for k in [k for k, v in s.cache.items() if vv_leq(v.cv, sv_now)]:
        del s.cache[k]
    last = vv_max(s.last_ss, sv_now)
    if t is not None and t.protocol is not Protocol.CV:
        last = vv_max(last, t.ss)
    s.last_ss = last
    if t is not None:
        s.last_site = t.site


def session_absorb(s: ClientSession, t: TxnRecord) -> None:
    final: Dict[int, bytes] = {}
    for k, val in t.ws:
        final[k] = val
    for k, val in final.items():
        s.cache[k] = make_version(k, val, t.dep, t.ct, t.site, t.txn)


def prefer_cached(s: Optional[ClientSession], v: ObjectVersion) -> Tuple[ObjectVersion, bool]:
    if s is None:
        return v, False
    c = s.cache.get(v.key)
    if c is not None and recency_less(v, c):
        return c, True
    return v, False


PROCEED, ADOPT, WAIT = "proceed", "adopt", "wait"


def monotonic_catchup(site_sv, client_ss, same_site: bool) -> str:
    if vv_leq(client_ss, site_sv):
        return PROCEED
    if same_site:
        return ADOPT
    return WAIT


class Coordinator:
    """Message-driven TC for one transaction, hosted by a partition server."""

    def __init__(self, net, txn: int, host, protocol: Protocol, client, session: Optional[ClientSession],
                 partitioner, catchup: bool = True):
        self.net = net
        self.txn = txn
        self.host = host
        self.protocol = Protocol.parse(protocol)
        self.client = client
        self.session = session
        self.partitioner = partitioner
        self.catchup = catchup
        self.t: Optional[TxnRecord] = None
        self.ready = False
        self.queue: List[Tuple[str, tuple]] = []
        self.read_cache: Dict[int, ObjectVersion] = {}
        self.pending: Dict[int, list] = {}
        self.round_keys: List = []
        self.proposals: Dict[int, int] = {}
        self.participants: List[int] = []
        self.collapsed = False
        self.began_at = net.now

    @property
    def addr(self):
        return ("tc", self.txn)

    # -- init / catch-up ----------------------------------------------------

    def start(self) -> None:
        host = self.host
        s = self.session
        if s is not None and self.catchup and self.protocol is not Protocol.CV:
            decision = monotonic_catchup(host.sv, s.last_ss, s.last_site in (None, host.site))
            if decision == ADOPT:
                if self.protocol is Protocol.CURE:
                    # Cure folds last_ss into the snapshot instead (see _init).
                    self.net.log("catchup", txn=self.txn, mode="fold", wait=0, target=list(s.last_ss))
                else:
                    host.adopt_sv(s.last_ss)
                    self.net.log("catchup", txn=self.txn, site=host.site, part=host.part, mode=ADOPT,
                                 wait=0, target=list(s.last_ss))
            elif decision == WAIT:
                target, t0 = s.last_ss, self.net.now

                def resume():
                    self.net.log("catchup", txn=self.txn, site=host.site, part=host.part, mode=WAIT,
                                 wait=self.net.now - t0,
                                 target=list(target))
                    self._init()

                host.wait_for_sv(target, resume)
                return
        self._init()

    def _init(self) -> None:
        host = self.host
        clock_value = host.clock.read() if self.protocol is Protocol.CURE else None
        t = init(self.protocol, host.site, host.sv, clock_value, self.txn)
        s = self.session
        if s is not None and self.catchup and self.protocol is Protocol.CURE:
            if s.last_site in (None, host.site):
                t.ss = t.dep = vv_max(t.ss, s.last_ss)
        self.t = t
        self.net.log(
            "txn-begin", txn=self.txn, client=self.client.cid, site=host.site, part=host.part,
            ss=list(t.ss), dep=list(t.dep),
        )
        self.ready = True
        queued, self.queue = self.queue, []
        for op, args in queued:
            getattr(self, op)(*args)

    # -- client requests ------------------------------------------------------

    def client_read(self, keys) -> None:
        if not self.ready:
            self.queue.append(("client_read", (keys,)))
            return
        self.read_objects(keys)

    def client_update(self, pairs) -> None:
        if not self.ready:
            self.queue.append(("client_update", (pairs,)))
            return
        update_objects(self.t, pairs)

    def client_commit(self) -> None:
        if not self.ready:
            self.queue.append(("client_commit", ()))
            return
        self.commit()

    # -- reads ----------------------------------------------------------------

    def read_objects(self, keys) -> None:
        t = self.t
        if t.phase is not Phase.ACTIVE:
            raise PhaseError(f"txn {t.txn} is {t.phase.value}")
        self.round_keys = list(dict.fromkeys(keys))
        fresh = [k for k in self.round_keys if k not in self.read_cache]
        groups = get_parts(fresh, self.partitioner)
        for part in groups:
            if not self.net.reachable(self.host.site, part):
                self.abort(reason="unreachable")
                return
        self.pending = {part: None for part in groups}
        for part, ks in sorted(groups.items()):
            self.net.log("read-req", txn=t.txn, site=self.host.site, part=part, keys=ks, ss=list(t.ss))
            self.net.send_to_partition(self, self.host.site, part, "handle_read", self, t.txn, ks, t.ss)
        if not groups:
            self._finish_round()

    def on_read_resp(self, part: int, versions, wait: int) -> None:
        if self.t.phase is not Phase.ACTIVE or part not in self.pending:
            return
        self.pending[part] = versions
        if all(v is not None for v in self.pending.values()):
            self._finish_round()

    def _finish_round(self) -> None:
        t = self.t
        returned = []
        for versions in self.pending.values():
            for v in versions:
                chosen, from_cache = prefer_cached(self.session, v)
                self.read_cache[v.key] = chosen
                returned.append((chosen, "cache" if from_cache else "server"))
        fold_read_dep(t, [v for v, _ in returned])
        self.pending = {}
        self.net.log(
            "read-done", txn=t.txn, versions=[[v.key, v.txn, src] for v, src in returned],
            dep=list(t.dep),
        )
        values = [self.read_cache[k].value for k in self.round_keys]
        self.net.to_client(self, self.client, "on_read_result", t.txn, values)

    # -- commit ---------------------------------------------------------------

    def commit(self) -> None:
        t = self.t
        if t.phase is not Phase.ACTIVE:
            raise PhaseError(f"txn {t.txn} is {t.phase.value}")
        if not t.ws:
            t.phase = Phase.COMMITTED
            self._ack(committed=True)
            return
        t.ct = initial_commit_time(t.dep)
        t.phase = Phase.PREPARING
        groups = get_parts([k for k, _ in t.ws], self.partitioner)
        self.participants = sorted(groups)
        for part in self.participants:
            if not self.net.reachable(self.host.site, part):
                self.abort(reason="unreachable")
                return
        self.collapsed = len(groups) == 1
        for part in self.participants:
            keys = set(groups[part])
            upds = [(k, v) for k, v in t.ws if k in keys]
            self.net.send_to_partition(
                self, self.host.site, part, "handle_prepare", self, t.txn, upds, t.dep, t.ct, self.collapsed,
            )

    def on_prepared(self, part: int, time: Optional[int], final: Optional[int]) -> None:
        t = self.t
        if t.phase is not Phase.PREPARING:
            return
        self.net.log("prepared", txn=t.txn, site=self.host.site, part=part, time=time)
        if time is None:
            self.abort(reason="prepare-failed")
            return
        self.proposals[part] = time
        if len(self.proposals) < len(self.participants):
            return
        if self.collapsed:
            t.ct = final
        else:
            t.ct = final_commit_time(t.protocol, t.ct, list(self.proposals.values()))
        t.phase = Phase.COMMITTED
        if self.session is not None:
            session_absorb(self.session, t)
        self._ack(committed=True)
        if not self.collapsed:
            for part in self.participants:
                self.net.send_to_partition(self, self.host.site, part, "handle_commit", t.txn, t.ct)

    def abort(self, reason: str) -> None:
        t = self.t
        t.phase = Phase.ABORTED
        self.pending = {}
        for part in self.participants:
            self.net.send_to_partition(self, self.host.site, part, "handle_abort", t.txn)
        self.net.log("abort", txn=t.txn, site=self.host.site, part=None, reason=reason)
        self._ack(committed=False)

    def _ack(self, committed: bool) -> None:
        t = self.t
        sv_now = tuple(self.host.sv)
        self.net.log(
            "client-ack", txn=t.txn, client=self.client.cid, committed=committed,
            ct=t.ct if t.ws else None, cv=list(t.cv) if (t.ws and committed) else None,
            keys=sorted({k for k, _ in t.ws}), ss=list(t.ss), sv=list(sv_now),
        )
        self.net.to_client(self, self.client, "on_txn_done", t.txn, committed, sv_now, t)

"""Deterministic discrete-event simulation of sites, partitions and clients.

One seeded :class:`random.Random` drives every latency draw, clock skew and
workload choice, and events are ordered by ``(time, seqno)``, so a config
plus a seed fully determines the history log.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

from .coordinator import ClientSession, Coordinator, Partitioner, session_finalize
from .partition import PartitionServer
from .store import Protocol
from .timebase import ConfigError, SiteClock

LINK_CLASSES = ("intra", "cross", "client")

STABILISATION_KINDS = frozenset({"config", "stable-tick", "stable-recv", "heartbeat-recv"})


class SimDeadlock(RuntimeError):
    def __init__(self, message: str, dump: Dict[str, Any]):
        super().__init__(message)
        self.dump = dump


@dataclass
class TxnSpec:
    """One transaction a client will execute: read rounds, then blind writes."""

    rounds: List[List[int]] = field(default_factory=list)
    writes: List[Tuple[int, bytes]] = field(default_factory=list)

    @property
    def kind(self) -> str:
        if self.rounds and self.writes:
            return "mixed"
        return "update" if self.writes else "read"


@dataclass
class SimConfig:
    sites: int = 2
    parts: int = 4
    clients: int = 16
    seed: int = 0
    protocol: str = "AV"
    latency: Dict[str, Tuple[int, int]] = field(
        default_factory=lambda: {"intra": (1, 3), "cross": (2, 5), "client": (1, 2)}
    )
    clock_offsets: Optional[List[int]] = None
    skew: int = 0
    jitter: int = 0
    stab_period: int = 100
    gc_max: int = 50
    gc_keep: int = 20
    session_cache: bool = True
    catchup: bool = True
    heartbeat_with_updates: bool = True
    prepare_fail_rate: float = 0.0
    unreachable: List[Tuple[int, int]] = field(default_factory=list)
    placement: Dict[int, int] = field(default_factory=dict)
    max_txns: Optional[int] = None
    duration: Optional[int] = None
    max_drain_periods: int = 20
    deadlock_periods: int = 50
    workload: Any = None

    def validate(self) -> None:
        if self.sites < 1 or self.parts < 1:
            raise ConfigError("need at least one site and one partition")
        if self.stab_period <= 0:
            raise ConfigError("stabilisation period must be positive")
        for cls in LINK_CLASSES:
            lo, hi = self.latency.get(cls, (1, 1))
            if lo < 1 or hi < lo:
                raise ConfigError(f"bad latency range for {cls}: {(lo, hi)}")
        if self.clock_offsets is not None and len(self.clock_offsets) != self.sites:
            raise ConfigError("clock_offsets needs one entry per site")
        for k, p in self.placement.items():
            if not 0 <= p < self.parts:
                raise ConfigError(f"key {k} placed on unknown partition {p}")
        Protocol.parse(self.protocol)

    def header(self) -> Dict[str, Any]:
        d = asdict(self)
        d.pop("workload")
        d["latency"] = {k: list(v) for k, v in sorted(self.latency.items())}
        d["placement"] = {str(k): v for k, v in sorted(self.placement.items())}
        d["unreachable"] = [list(x) for x in self.unreachable]
        d["protocol"] = Protocol.parse(self.protocol).value
        wl = self.workload
        if wl is not None and hasattr(wl, "header"):
            d["workload"] = wl.header()
        return d


class HistoryLog(list):
    """Append-only list of event records (dicts) with JSON-lines export."""

    def dumps(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "HistoryLog":
        with open(path, encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    @classmethod
    def loads(cls, text: str) -> "HistoryLog":
        return cls(json.loads(line) for line in text.splitlines() if line.strip())


class Client:
    def __init__(self, sim: "Simulation", cid: int, site: int, stream: Iterator[TxnSpec]):
        self.sim = sim
        self.cid = cid
        self.site = site
        self.stream = stream
        self.session = ClientSession(cid, sim.cfg.sites, sticky_site=site)
        self.done = False
        self.current: Optional[TxnSpec] = None
        self.tc: Optional[Coordinator] = None
        self.round = 0
        self.t_start = 0
        self.t_reads = None
        self.on_idle: Optional[Callable[["Client"], None]] = None

    @property
    def addr(self):
        return ("c", self.cid)

    def next_txn(self) -> None:
        if self.sim.workload_exhausted():
            self.done = True
            return
        spec = next(self.stream, None)
        if spec is None:
            self.done = True
            return
        self.execute(spec)

    def execute(self, spec: TxnSpec, tc_part: Optional[int] = None) -> Coordinator:
        self.current = spec
        self.round = 0
        self.t_start = self.sim.now
        self.t_reads = None
        self.tc = self.sim.open_txn(self, tc_part)
        if spec.rounds:
            self.sim.to_tc(self, self.tc, "client_read", spec.rounds[0])
        else:
            self._send_writes_and_commit()
        return self.tc

    def _send_writes_and_commit(self) -> None:
        if self.current.writes:
            self.sim.to_tc(self, self.tc, "client_update", self.current.writes)
        self.sim.to_tc(self, self.tc, "client_commit")

    def on_read_result(self, txn: int, values) -> None:
        if self.tc is None or txn != self.tc.txn:
            return
        self.round += 1
        if self.round < len(self.current.rounds):
            self.sim.to_tc(self, self.tc, "client_read", self.current.rounds[self.round])
            return
        self.t_reads = self.sim.now
        self._send_writes_and_commit()

    def on_txn_done(self, txn: int, committed: bool, sv_now, record) -> None:
        if self.tc is None or txn != self.tc.txn:
            return
        session_finalize(self.session, record, sv_now)
        self.sim.live.pop(txn, None)
        self.sim.log(
            "txn-end", txn=txn, client=self.cid, txn_kind=self.current.kind, committed=committed,
            start=self.t_start, reads_done=self.t_reads, last_ss=list(self.session.last_ss),
        )
        self.tc = None
        self.current = None
        if self.on_idle is not None:
            self.on_idle(self)
        else:
            self.next_txn()


class Simulation:
    def __init__(self, cfg: SimConfig, streams: Optional[Sequence[Iterator[TxnSpec]]] = None):
        cfg.validate()
        self.cfg = cfg
        self.protocol = Protocol.parse(cfg.protocol)
        self.rng = random.Random(cfg.seed)
        self.now = 0
        self._seq = 0
        self._queue: List = []
        self.log_records = HistoryLog()
        self._log_seq = 0
        self._channel_last: Dict[Tuple, int] = {}
        self.in_flight = 0
        self.deliveries = 0
        self.txn_deliveries = 0
        self.msg_count: Dict[int, int] = {}
        self.held: List[Tuple] = []
        self.hold_filter: Optional[Callable[..., bool]] = None
        self.partitioner = Partitioner(cfg.parts, cfg.placement)
        self.unreachable = {tuple(x) for x in cfg.unreachable}
        self.max_ct = [0] * cfg.sites
        self.txn_counter = 0
        self.coordinators: Dict[int, Coordinator] = {}
        self.live: Dict[int, Coordinator] = {}
        self.stopped = False
        self.drained = None

        offsets = cfg.clock_offsets or [0] * cfg.sites
        self.partitions: Dict[Tuple[int, int], PartitionServer] = {}
        for s in range(cfg.sites):
            for p in range(cfg.parts):
                skew = self.rng.randint(-cfg.skew, cfg.skew) if cfg.skew else 0
                clock = SiteClock(s, self._now, offsets[s] + skew, cfg.jitter, self.rng)
                self.partitions[(s, p)] = PartitionServer(
                    self, s, p, cfg.sites, cfg.parts, self.protocol, clock,
                    cfg.gc_max, cfg.gc_keep, cfg.heartbeat_with_updates,
                )
        self.log("config", **cfg.header())
        self.clients: List[Client] = []
        for cid, stream in enumerate(streams or []):
            self.clients.append(Client(self, cid, cid % cfg.sites, stream))

    # -- basic machinery ------------------------------------------------------

    def _now(self) -> int:
        return self.now

    def log(self, kind: str, **fields) -> None:
        rec = {"seq": self._log_seq, "t": self.now, "kind": kind}
        rec.update(fields)
        self.log_records.append(rec)
        self._log_seq += 1
        if kind == "commit":
            s = fields["site"]
            if fields["ct"] > self.max_ct[s]:
                self.max_ct[s] = fields["ct"]

    def schedule(self, delay: int, fn: Callable, *args) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (self.now + delay, self._seq, False, fn, args))

    def _latency(self, cls: str) -> int:
        lo, hi = self.cfg.latency.get(cls, (1, 1))
        return lo if lo == hi else self.rng.randint(lo, hi)

    def _send(self, src, dst, link: str, fn: Callable, args: tuple, txn: Optional[int] = None,
              counted: bool = False) -> None:
        if txn is not None and not counted:
            self.msg_count[txn] = self.msg_count.get(txn, 0) + 1
        if self.hold_filter is not None and self.hold_filter(src, dst, fn, args):
            self.held.append((src, dst, link, fn, args, txn))
            return
        at = self.now + self._latency(link)
        key = (src, dst)
        last = self._channel_last.get(key, 0)
        if at < last:
            at = last
        self._channel_last[key] = at
        self._seq += 1
        self.in_flight += 1
        # 2 marks transaction traffic, which is what deadlock detection watches
        kind = 2 if txn is not None or link == "client" else 1
        heapq.heappush(self._queue, (at, self._seq, kind, fn, args))

    def release(self, pred: Callable[..., bool] = lambda *a: True) -> int:
        keep, out = [], []
        for item in self.held:
            (out if pred(*item[:2], item[3], item[4]) else keep).append(item)
        self.held = keep
        for src, dst, link, fn, args, txn in out:
            saved, self.hold_filter = self.hold_filter, None
            self._send(src, dst, link, fn, args, txn, counted=True)
            self.hold_filter = saved
        return len(out)

    def step(self) -> bool:
        if not self._queue:
            return False
        at, _, is_msg, fn, args = heapq.heappop(self._queue)
        self.now = at
        if is_msg:
            self.in_flight -= 1
            self.deliveries += 1
            if is_msg == 2:
                self.txn_deliveries += 1
        fn(*args)
        return True

    # -- addressing -------------------------------------------------------------

    def partition(self, site: int, part: int) -> PartitionServer:
        try:
            return self.partitions[(site, part)]
        except KeyError:
            raise ConfigError(f"unknown partition {site}.{part}") from None

    def reachable(self, site: int, part: int) -> bool:
        return (site, part) not in self.unreachable

    def send_partition(self, src: PartitionServer, site: int, part: int, method: str, *args, link: str) -> None:
        dst = self.partition(site, part)
        self._send(src.addr, dst.addr, link, getattr(dst, method), args)

    def send_to_partition(self, tc: Coordinator, site: int, part: int, method: str, *args) -> None:
        dst = self.partition(site, part)
        if method == "handle_prepare" and self._prepare_fails():
            self._send(tc.addr, dst.addr, "intra", self._failed_prepare, (dst, tc, args), txn=tc.txn)
            return
        self._send(tc.addr, dst.addr, "intra", getattr(dst, method), args, txn=tc.txn)

    def _prepare_fails(self) -> bool:
        rate = self.cfg.prepare_fail_rate
        return rate > 0 and self.rng.random() < rate

    def _failed_prepare(self, dst: PartitionServer, tc: Coordinator, args) -> None:
        self.log("prepare-refused", txn=tc.txn, site=dst.site, part=dst.part)
        self.reply(dst, tc, "on_prepared", dst.part, None, None)

    def reply(self, src: PartitionServer, tc: Coordinator, method: str, *args) -> None:
        self._send(src.addr, tc.addr, "intra", getattr(tc, method), args, txn=tc.txn)

    def to_client(self, tc: Coordinator, client: Client, method: str, *args) -> None:
        self._send(tc.addr, client.addr, "client", getattr(client, method), args)

    def to_tc(self, client: Client, tc: Coordinator, method: str, *args) -> None:
        self._send(client.addr, tc.addr, "client", getattr(tc, method), args)

    # -- transactions -----------------------------------------------------------

    def open_txn(self, client: Client, tc_part: Optional[int] = None) -> Coordinator:
        self.txn_counter += 1
        txn = self.txn_counter
        if tc_part is None:
            tc_part = self.rng.randrange(self.cfg.parts)
        host = self.partition(client.site, tc_part)
        tc = Coordinator(
            self, txn, host, self.protocol, client, client.session, self.partitioner,
            catchup=self.cfg.catchup,
        )
        if not self.cfg.session_cache:
            tc.session = _NoCache(client.session)
        self.coordinators[txn] = tc
        self.live[txn] = tc
        # The TC comes to life when the client's first request reaches the host.
        self._send(client.addr, tc.addr, "client", tc.start, ())
        return tc

    def active_snapshots(self, site: int) -> List[tuple]:
        return [tc.t.ss for tc in self.live.values() if tc.t is not None and tc.host.site == site]

    def workload_exhausted(self) -> bool:
        cfg = self.cfg
        if cfg.max_txns is not None and self.txn_counter >= cfg.max_txns:
            return True
        if cfg.duration is not None and self.now >= cfg.duration:
            return True
        return False

    # -- clocks / links -----------------------------------------------------------

    def inject_skew(self, site: int, offset: int, part: Optional[int] = None) -> None:
        """Set the clock offset of every server at ``site`` (or just ``part``)."""
        if part is not None:
            self.partition(site, part)
        for (s, q), p in self.partitions.items():
            if s == site and part in (None, q):
                p.clock.offset = offset

    def set_latency(self, link: str, lo_hi: Tuple[int, int]) -> None:
        if link not in LINK_CLASSES:
            raise ConfigError(f"unknown link class {link}")
        self.cfg.latency[link] = tuple(lo_hi)
        self.cfg.validate()

    # -- timers -------------------------------------------------------------------

    def start_timers(self) -> None:
        period = self.cfg.stab_period
        for key in sorted(self.partitions):
            self._seq += 1
            heapq.heappush(self._queue, (period, self._seq, False, self._tick, (self.partitions[key],)))

    def _tick(self, p: PartitionServer) -> None:
        if self.stopped:
            return
        p.tick()
        p.wake_blocked()
        self.schedule(self.cfg.stab_period, self._tick, p)

    # -- running --------------------------------------------------------------------

    def quiescent(self) -> bool:
        if self.in_flight or any(c.tc is not None for c in self.clients):
            return False
        for p in self.partitions.values():
            if p.prepared or p.to_send or p.blocked:
                return False
            if self.protocol is not Protocol.CV:
                if any(p.sv[j] < self.max_ct[j] for j in range(self.cfg.sites)):
                    return False
        return True

    def run(self) -> HistoryLog:
        self.start_timers()
        for c in self.clients:
            c.next_txn()
        period = self.cfg.stab_period
        last_progress = (self.txn_deliveries, 0)
        drain_start = None
        while True:
            if not self.step():
                break
            if self.txn_deliveries != last_progress[0]:
                last_progress = (self.txn_deliveries, self.now)
            active = not all(c.done for c in self.clients)
            if active:
                if self.now - last_progress[1] > self.cfg.deadlock_periods * period:
                    raise SimDeadlock("no progress while transactions are pending", self.dump())
                continue
            if drain_start is None:
                drain_start = self.now
            if self.now >= period and self.quiescent():
                self.drained = True
                break
            if self.now - drain_start > self.cfg.max_drain_periods * period:
                self.drained = False
                break
        self.stopped = True
        return self.log_records

    def dump(self) -> Dict[str, Any]:
        return {
            "now": self.now,
            "blocked_reads": {
                repr(p): [(r.txn, r.ss, r.causes) for r in p.blocked]
                for p in self.partitions.values() if p.blocked
            },
            "prepared": {repr(p): sorted(p.prepared) for p in self.partitions.values() if p.prepared},
            "sv_waiters": {repr(p): len(p.sv_waiters) for p in self.partitions.values() if p.sv_waiters},
            "clients": {c.cid: (c.tc.txn if c.tc else None) for c in self.clients if not c.done},
        }


class _NoCache:
    """Session view with the read-your-writes cache switched off."""

    def __init__(self, session: ClientSession):
        object.__setattr__(self, "_s", session)

    @property
    def cache(self):
        return {}

    def __getattr__(self, name):
        return getattr(self._s, name)

    def __setattr__(self, name, value):
        setattr(self._s, name, value)


def run(config: SimConfig) -> HistoryLog:
    return simulate(config).log_records


def simulate(config: SimConfig, setup: Optional[Callable[[Simulation], None]] = None) -> Simulation:
    wl = config.workload
    streams: List[Iterator[TxnSpec]] = []
    if wl is not None:
        rng = random.Random(f"workload:{config.seed}")
        for cid in range(config.clients):
            streams.append(wl.client_stream(cid, random.Random(rng.random())))
    sim = Simulation(config, streams)
    if setup is not None:
        setup(sim)
    sim.run()
    return sim

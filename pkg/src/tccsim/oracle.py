"""Offline history checker.

Everything here consumes only the exported event log (a list of dicts, as
produced by :mod:`tccsim.simnet` or read back from JSON lines).  Version
precedence comes from commit/dependency vectors alone, so the checker is
independent of which protocol produced the history.
"""
from __future__ import annotations

import bisect
import csv
import io
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .store import INITIAL_TXN, ObjectVersion, Protocol, initial_version
from .timebase import vv_leq, zero

Vid = Tuple[int, int]


def version_precedes(u: ObjectVersion, v: ObjectVersion) -> bool:
    """``u`` is causally before ``v``.  Initial versions precede every write."""
    if v.is_initial:
        return False
    if u is v or u.vid == v.vid:
        return False
    return _leq(u.cv, v.dep)


class VersionGraph:
    def __init__(self, m: int):
        self.m = m
        self.versions: Dict[Vid, ObjectVersion] = {}
        self.by_key: Dict[int, List[ObjectVersion]] = defaultdict(list)
        self.by_txn: Dict[int, List[ObjectVersion]] = defaultdict(list)
        self._index: Dict[int, tuple] = {}

    def add(self, v: ObjectVersion) -> None:
        if v.vid in self.versions:
            return
        self.versions[v.vid] = v
        self.by_key[v.key].append(v)
        if not v.is_initial:
            self.by_txn[v.txn].append(v)

    def get(self, vid: Sequence[int]) -> ObjectVersion:
        key, txn = vid
        v = self.versions.get((key, txn))
        if v is None and txn == INITIAL_TXN:
            v = initial_version(key, self.m)
            self.add(v)
        if v is None:
            raise KeyError(f"version {tuple(vid)} never committed")
        return v

    def ensure_initial(self, keys: Iterable[int]) -> None:
        for k in keys:
            self.get((k, INITIAL_TXN))

    def versions_in_window(self, key, lo: int, hi: int) -> List[ObjectVersion]:
        """Versions of ``key`` with lo < ct <= hi."""
        idx = self._index.get(key)
        if idx is None or idx[0] != len(self.by_key[key]):
            vs = sorted(self.by_key[key], key=lambda v: v.ct)
            idx = self._index[key] = (len(vs), [v.ct for v in vs], vs)
        _, cts, vs = idx
        return vs[bisect.bisect_right(cts, lo):bisect.bisect_right(cts, hi)]

    def all(self) -> List[ObjectVersion]:
        return list(self.versions.values())


def check_order_preserving(readset: Sequence[ObjectVersion], graph: VersionGraph) -> bool:
    return find_gap(readset, graph) is None


def _leq(a, b) -> bool:
    for x, y in zip(a, b):
        if x > y:
            return False
    return True


def find_gap(readset, graph):
    """First (x_i, x_k, y_j) with x_i < x_k < y_j, x_k a version of x_i's object."""
    writes = [y for y in readset if not y.is_initial]
    if not writes:
        return None
    hi = max(max(y.dep) for y in writes)
    for xi in readset:
        # x_i < x_k forces x_k.ct > min(x_i.cv); x_k < y_j forces x_k.ct <= max(y_j.dep).
        for xk in graph.versions_in_window(xi.key, min(xi.cv), hi):
            if xk.vid == xi.vid or not _leq(xi.cv, xk.dep):
                continue
            for yj in writes:
                if yj is not xi and _leq(xk.cv, yj.dep):
                    return xi, xk, yj
    return None


def check_atomic(readset: Sequence[ObjectVersion], graph: VersionGraph, writes=None) -> bool:
    return find_broken_read(readset, graph, writes) is None


def find_broken_read(readset, graph, writes=None):
    """First (x_i, y_j, y_k): x_i and y_j share a writer, y_k read with y_k < y_j."""
    by_txn = writes if writes is not None else graph.by_txn
    read_of = {v.key: v for v in readset}
    for xi in readset:
        if xi.is_initial:
            continue
        for yj in by_txn.get(xi.txn, ()):
            if yj.key == xi.key:
                continue
            yk = read_of.get(yj.key)
            if yk is not None and version_precedes(yk, yj):
                return xi, yj, yk
    return None


def check_compatible(v: ObjectVersion, snapshot: Sequence[ObjectVersion], graph: VersionGraph) -> bool:
    if any(s.vid == v.vid for s in snapshot):
        return True
    for ai in snapshot:
        for ak in graph.by_key[ai.key]:
            if version_precedes(ai, ak) and version_precedes(ak, v):
                return False
    return True


def staleness(returned: ObjectVersion, chain: Iterable[ObjectVersion]) -> int:
    r = returned.recency
    return sum(1 for v in chain if v.recency > r)


# -- brute force (all-triples enumeration) ---------------------------------


def precedence_relation(versions: Sequence[ObjectVersion]) -> Set[Tuple[Vid, Vid]]:
    """Every pair (u, v) with u before v, by direct enumeration."""
    return {
        (u.vid, v.vid)
        for u in versions for v in versions
        if not v.is_initial and u.vid != v.vid and vv_leq(u.cv, v.dep)
    }


def is_strict_partial_order(rel: Set[Tuple[Vid, Vid]]) -> bool:
    if any(a == b for a, b in rel):
        return False
    succ: Dict[Vid, Set[Vid]] = defaultdict(set)
    for a, b in rel:
        succ[a].add(b)
    for a, bs in succ.items():
        for b in bs:
            if not succ.get(b, set()) <= bs:
                return False
    return True


def brute_order_preserving(readset, versions, rel=None) -> bool:
    rel = rel if rel is not None else precedence_relation(versions)
    for a in readset:
        for b in readset:
            for c in versions:
                if c.key == a.key and (a.vid, c.vid) in rel and (c.vid, b.vid) in rel:
                    return False
    return True


def brute_atomic(readset, versions, rel=None) -> bool:
    rel = rel if rel is not None else precedence_relation(versions)
    if not brute_order_preserving(readset, versions, rel):
        return False
    for xi in readset:
        for yj in versions:
            if yj.is_initial or yj.txn != xi.txn or yj.key == xi.key:
                continue
            for yk in readset:
                if yk.key == yj.key and (yk.vid, yj.vid) in rel:
                    return False
    return True


# -- history reconstruction --------------------------------------------------


@dataclass
class TxnView:
    txn: int
    client: Optional[int] = None
    site: Optional[int] = None
    part: Optional[int] = None
    begin_seq: Optional[int] = None
    begin_t: Optional[int] = None
    ss: Optional[tuple] = None
    reads: List[Tuple[Vid, str, int]] = field(default_factory=list)  # (vid, src, seq)
    served: Dict[int, Tuple[int, int, int, int, int]] = field(default_factory=dict)
    committed: Optional[bool] = None
    ack_seq: Optional[int] = None
    write_keys: List[int] = field(default_factory=list)
    cv: Optional[tuple] = None
    kind: Optional[str] = None
    start_t: Optional[int] = None
    reads_done_t: Optional[int] = None
    end_t: Optional[int] = None


@dataclass
class ReadRecord:
    txn: int
    site: int
    part: int
    seq: int
    t: int
    vids: List[Vid]
    skips: List[int]
    wait: int
    causes: List[str]


class History:
    """Parsed view of one event log."""

    def __init__(self, records: Sequence[Mapping]):
        self.records = records
        header = next((r for r in records if r["kind"] == "config"), None)
        if header is None:
            raise ValueError("log has no config header")
        self.header = header
        self.protocol = Protocol.parse(header["protocol"])
        self.m = header["sites"]
        self.n = header["parts"]
        self.graph = VersionGraph(self.m)
        self.txns: Dict[int, TxnView] = {}
        self.read_records: List[ReadRecord] = []
        self.reads_by_txn: Dict[int, List[ReadRecord]] = defaultdict(list)
        self.commit_seq: Dict[Vid, int] = {}
        self._parse()

    def txn(self, t: int) -> TxnView:
        tv = self.txns.get(t)
        if tv is None:
            tv = self.txns[t] = TxnView(t)
        return tv

    def _parse(self) -> None:
        for r in self.records:
            kind = r["kind"]
            if kind == "commit":
                dep = tuple(r["dep"])
                for k in r["keys"]:
                    v = ObjectVersion(k, b"", dep, tuple(r["cv"]), r["ct"], r["site"], r["txn"])
                    self.graph.add(v)
                    self.commit_seq.setdefault(v.vid, r["seq"])
            elif kind == "txn-begin":
                tv = self.txn(r["txn"])
                tv.client, tv.site, tv.part = r["client"], r["site"], r["part"]
                tv.begin_seq, tv.begin_t, tv.ss = r["seq"], r["t"], tuple(r["ss"])
            elif kind == "read-resp":
                rr = ReadRecord(
                    r["txn"], r["site"], r["part"], r["seq"], r["t"],
                    [tuple(x) for x in r["versions"]], list(r["skips"]), r["wait"], list(r["causes"]),
                )
                self.read_records.append(rr)
                self.reads_by_txn[rr.txn].append(rr)
                tv = self.txn(r["txn"])
                for i, vid in enumerate(rr.vids):
                    tv.served[vid[0]] = (r["site"], r["part"], r["seq"], rr.skips[i], vid[1])
            elif kind == "read-done":
                tv = self.txn(r["txn"])
                for key, vtxn, src in r["versions"]:
                    tv.reads.append(((key, vtxn), src, r["seq"]))
            elif kind == "client-ack":
                tv = self.txn(r["txn"])
                tv.committed = r["committed"]
                tv.ack_seq = r["seq"]
                tv.write_keys = list(r["keys"])
                tv.cv = tuple(r["cv"]) if r.get("cv") else None
                if tv.client is None:
                    tv.client = r["client"]
            elif kind == "txn-end":
                tv = self.txn(r["txn"])
                tv.kind = r["txn_kind"]
                tv.start_t = r["start"]
                tv.reads_done_t = r["reads_done"]
                tv.end_t = r["t"]
                if tv.client is None:
                    tv.client = r["client"]
        keys = {vid[0] for tv in self.txns.values() for vid, _, _ in tv.reads}
        self.graph.ensure_initial(keys)

    def readset(self, txn: int) -> List[ObjectVersion]:
        return [self.graph.get(vid) for vid, _, _ in self.txns[txn].reads]

    def commit_point(self, v: ObjectVersion) -> int:
        """Log position where the writer became committed (client ack)."""
        if v.is_initial:
            return -1
        tv = self.txns.get(v.txn)
        if tv is not None and tv.ack_seq is not None:
            return tv.ack_seq
        return self.commit_seq.get(v.vid, -1)


# -- per-transaction checks ---------------------------------------------------


def install_positions(records: Sequence[Mapping]) -> Dict[Tuple[int, int, int, int], int]:
    out = {}
    for r in records:
        if r["kind"] in ("commit", "deliver-remote"):
            for k in r.get("installed", r.get("keys", ())):
                out.setdefault((r["site"], r["part"], k, r["txn"]), r["seq"])
    return out


def check_committed(h: History, txn: int, installs=None) -> bool:
    installs = installs if installs is not None else install_positions(h.records)
    tv = h.txns[txn]
    for vid, src, seq in tv.reads:
        key, vtxn = vid
        if vtxn == INITIAL_TXN:
            continue
        if src == "cache":
            writer = h.txns.get(vtxn)
            if writer is None or not writer.committed or writer.ack_seq is None or writer.ack_seq > seq:
                return False
            continue
        served = tv.served.get(key)
        if served is None:
            return False
        site, part, resp_seq, _, served_txn = served
        pos = installs.get((site, part, key, served_txn))
        if served_txn != vtxn or pos is None or pos > resp_seq:
            return False
    return True


def replay_staleness(h: History) -> Dict[int, List[int]]:
    """Recompute each read-resp's skip counts from installs and evictions.

    Keyed by the read-resp sequence number.
    """
    present: Dict[Tuple[int, int, int], Dict[Vid, ObjectVersion]] = defaultdict(dict)
    single = not h.protocol.multi_version
    out: Dict[int, List[int]] = {}
    g = h.graph
    for r in h.records:
        kind = r["kind"]
        if kind in ("commit", "deliver-remote"):
            for k in r["installed"]:
                slot = present[(r["site"], r["part"], k)]
                if single:
                    slot.clear()
                v = g.get((k, r["txn"]))
                slot[v.vid] = v
        elif kind == "gc":
            for k, t in r["evicted"]:
                present[(r["site"], r["part"], k)].pop((k, t), None)
                if t == INITIAL_TXN:
                    present[(r["site"], r["part"], k)][("evicted-initial", k)] = None
        elif kind == "read-resp":
            skips = []
            for k, t in r["versions"]:
                slot = present[(r["site"], r["part"], k)]
                chain = [v for v in slot.values() if v is not None]
                if ("evicted-initial", k) not in slot:
                    chain.append(g.get((k, INITIAL_TXN)))
                skips.append(staleness(g.get((k, t)), chain))
            out[r["seq"]] = skips
    return out


def freshness_class(h: History, txn: int) -> str:
    tv = h.txns[txn]
    if all(entry[3] == 0 for entry in tv.served.values()):
        return "latest"
    begin = tv.begin_seq if tv.begin_seq is not None else -1
    if any(h.commit_point(v) > begin for v in h.readset(txn)):
        return "concurrent"
    return "stable"


CONTRACT = {
    Protocol.CV: "committed",
    Protocol.OP: "order_preserving",
    Protocol.AV: "atomic",
    Protocol.CURE: "atomic",
    Protocol.LATEST: "committed",
}


@dataclass
class ReadVerdict:
    txn: int
    client: Optional[int]
    kind: Optional[str]
    committed: bool
    order_preserving: bool
    atomic: bool
    reads: int
    stale_reads: int
    max_skips: int
    concurrent_fresh_reads: int
    freshness: str
    delay: str
    wait: int
    causes: str
    contract_ok: bool


def verdicts(h: History) -> List[ReadVerdict]:
    installs = install_positions(h.records)
    out = []
    contract = CONTRACT[h.protocol]
    for txn, tv in sorted(h.txns.items()):
        if not tv.reads:
            continue
        rs = h.readset(txn)
        committed = check_committed(h, txn, installs)
        op = check_order_preserving(rs, h.graph)
        at = op and check_atomic(rs, h.graph)
        skips = [s[3] for s in tv.served.values()]
        waits = _txn_waits(h, txn)
        wait_total = sum(w for w, _ in waits)
        causes = sorted({c for _, cs in waits for c in cs})
        begin = tv.begin_seq if tv.begin_seq is not None else -1
        conc = sum(1 for v in rs if h.commit_point(v) > begin)
        verdict = {"committed": committed, "order_preserving": committed and op, "atomic": committed and at}
        out.append(ReadVerdict(
            txn=txn, client=tv.client, kind=tv.kind,
            committed=committed, order_preserving=verdict["order_preserving"], atomic=verdict["atomic"],
            reads=len(skips), stale_reads=sum(1 for s in skips if s > 0),
            max_skips=max(skips, default=0), concurrent_fresh_reads=conc,
            freshness=freshness_class(h, txn),
            delay="deferred" if wait_total else "minimal", wait=wait_total,
            causes="+".join(causes), contract_ok=verdict[contract],
        ))
    return out


def _txn_waits(h: History, txn: int):
    return [(rr.wait, rr.causes) for rr in h.reads_by_txn.get(txn, ())]


# -- delay accounting -----------------------------------------------------------


@dataclass
class DelaySummary:
    reads: int
    requests: int
    max_rounds: int
    max_wait: int
    stale_fraction: float
    staleness_cdf: Dict[int, float]
    mv_overhead: float
    deferrals: Dict[str, int]
    unanswered_requests: int


def delay_accounting(h: History, since_t: int = 0) -> DelaySummary:
    reqs = Counter()
    resps = Counter()
    aborted = {tv.txn for tv in h.txns.values() if tv.committed is False}
    for r in h.records:
        if r["kind"] == "read-req":
            reqs[(r["txn"], r["site"], r["part"])] += 1
        elif r["kind"] == "read-resp":
            resps[(r["txn"], r["site"], r["part"])] += 1
    unanswered = sum(
        max(0, n - resps[k]) for k, n in reqs.items() if k[0] not in aborted
    )
    max_rounds = max((resps[k] // max(1, reqs[k]) for k in resps), default=0)
    skips: List[int] = []
    deferrals: Counter = Counter()
    max_wait = 0
    for rr in h.read_records:
        tv = h.txns.get(rr.txn)
        if tv is not None and tv.begin_t is not None and tv.begin_t < since_t:
            continue
        skips.extend(rr.skips)
        max_wait = max(max_wait, rr.wait)
        for c in rr.causes:
            deferrals[c] += 1
    n = len(skips)
    hist = Counter(skips)
    cdf, acc = {}, 0
    for s in sorted(hist):
        acc += hist[s]
        cdf[s] = acc / n
    return DelaySummary(
        reads=n,
        requests=sum(resps.values()),
        max_rounds=max_rounds,
        max_wait=max_wait,
        stale_fraction=(sum(1 for s in skips if s > 0) / n) if n else 0.0,
        staleness_cdf=cdf,
        mv_overhead=(sum(s + 1 for s in skips) / n) if n else 1.0,
        deferrals=dict(deferrals),
        unanswered_requests=unanswered,
    )


# -- sessions -------------------------------------------------------------------


@dataclass
class SessionVerdict:
    client: int
    ryw_violations: int = 0
    mr_violations: int = 0


def check_sessions(h: History) -> Dict[int, SessionVerdict]:
    by_client: Dict[int, List[TxnView]] = defaultdict(list)
    for tv in h.txns.values():
        if tv.client is not None and tv.begin_seq is not None:
            by_client[tv.client].append(tv)
    out = {}
    for client, txns in sorted(by_client.items()):
        txns.sort(key=lambda tv: tv.begin_seq)
        verdict = SessionVerdict(client)
        own: Dict[int, Tuple[int, int]] = {}
        seen: Dict[int, Tuple[int, int]] = {}
        for tv in txns:
            for vid, _, _ in tv.reads:
                r = h.graph.get(vid).recency
                key = vid[0]
                if key in own and r < own[key]:
                    verdict.ryw_violations += 1
                if key in seen and r < seen[key]:
                    verdict.mr_violations += 1
                if key not in seen or r > seen[key]:
                    seen[key] = r
            if tv.committed and tv.cv is not None:
                ct = tv.cv[tv.site]
                for k in tv.write_keys:
                    own[k] = (ct, tv.site)
        out[client] = verdict
    return out


# -- protocol invariants ----------------------------------------------------------


@dataclass
class InvariantReport:
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        if len(self.violations) < 200:
            self.violations.append(msg)


def check_invariants(h: History) -> InvariantReport:
    rep = InvariantReport()
    txn_cv: Dict[int, tuple] = {}
    txn_meta: Dict[int, Tuple[int, tuple]] = {}
    last_vec: Dict[Tuple[int, int], tuple] = {}
    last_sv: Dict[Tuple[int, int], tuple] = {}
    channel_ct: Dict[Tuple[int, int, int], int] = {}
    site_svs: Dict[int, Dict[int, tuple]] = defaultdict(dict)
    check_stability = h.protocol is not Protocol.CV
    zero_m = zero(h.m)

    def note_sv(site, part, sv, seq):
        prev = last_sv.get((site, part), zero_m)
        if not vv_leq(prev, sv):
            rep.add(f"seq {seq}: sv regressed at p{site}.{part}: {prev} -> {sv}")
        last_sv[(site, part)] = sv
        site_svs[site][part] = sv

    def check_install(site, cv, seq, what):
        if not check_stability:
            return
        for part, sv in site_svs[site].items():
            if vv_leq(cv, sv):
                rep.add(f"seq {seq}: {what} with cv {cv} installed at site {site} under sv {sv} of part {part}")
                return

    for r in h.records:
        kind = r["kind"]
        seq = r["seq"]
        if kind == "commit":
            cv, dep, ct, site = tuple(r["cv"]), tuple(r["dep"]), r["ct"], r["site"]
            expect = list(dep)
            expect[site] = ct
            if cv != tuple(expect):
                rep.add(f"seq {seq}: txn {r['txn']} cv {cv} != dep with origin entry := ct")
            if not ct > dep[site]:
                rep.add(f"seq {seq}: txn {r['txn']} ct {ct} not above dep[{site}]")
            prev = txn_cv.setdefault(r["txn"], cv)
            if prev != cv:
                rep.add(f"seq {seq}: txn {r['txn']} has two commit vectors {prev} / {cv}")
            txn_meta[r["txn"]] = (ct, dep)
            check_install(site, cv, seq, f"commit of txn {r['txn']}")
        elif kind == "deliver-remote":
            ct, dep = r["ct"], tuple(r["dep"])
            meta = txn_meta.get(r["txn"])
            if meta is not None and meta != (ct, dep):
                rep.add(f"seq {seq}: remote delivery of txn {r['txn']} carries different ct/dep")
            if h.protocol is not Protocol.CV:
                ch = (r["src"], r["site"], r["part"])
                if ct < channel_ct.get(ch, 0):
                    rep.add(f"seq {seq}: channel {ch} delivered ct {ct} after {channel_ct[ch]}")
                channel_ct[ch] = max(ct, channel_ct.get(ch, 0))
            cv = list(dep)
            cv[r["src"]] = ct
            check_install(r["site"], tuple(cv), seq, f"delivery of txn {r['txn']}")
        elif kind == "stable-tick":
            key = (r["site"], r["part"])
            vec = tuple(r["vec"])
            prev = last_vec.get(key, zero_m)
            if not vv_leq(prev, vec):
                rep.add(f"seq {seq}: vec regressed at p{key[0]}.{key[1]}: {prev} -> {vec}")
            last_vec[key] = vec
            note_sv(r["site"], r["part"], tuple(r["sv"]), seq)
        elif kind == "stable-recv":
            note_sv(r["site"], r["part"], tuple(r["sv"]), seq)
        elif kind == "catchup" and r.get("mode") == "adopt" and "site" in r:
            prev = last_sv.get((r["site"], r["part"]), zero_m)
            merged = tuple(max(a, b) for a, b in zip(prev, r["target"]))
            note_sv(r["site"], r["part"], merged, seq)
    return rep


def check_conservation(h: History) -> List[str]:
    problems = []
    reqs, resps = Counter(), Counter()
    preps, prepared = Counter(), Counter()
    aborted = {tv.txn for tv in h.txns.values() if tv.committed is False}
    for r in h.records:
        k = r["kind"]
        if k == "read-req":
            reqs[(r["txn"], r["site"], r["part"])] += 1
        elif k == "read-resp":
            resps[(r["txn"], r["site"], r["part"])] += 1
        elif k in ("prepare", "prepare-refused"):
            preps[(r["txn"], r["site"], r["part"])] += 1
        elif k == "prepared":
            prepared[(r["txn"], r["site"], r["part"])] += 1
    for key, n in reqs.items():
        if resps[key] != n and key[0] not in aborted:
            problems.append(f"read request {key} answered {resps[key]}/{n} times")
    for key, n in preps.items():
        if prepared[key] != n and key[0] not in aborted:
            problems.append(f"prepare {key} answered {prepared[key]}/{n} times")
    return problems


# -- reports -----------------------------------------------------------------------


VERDICT_FIELDS = [f for f in ReadVerdict.__dataclass_fields__]


def verdicts_csv(rows: Sequence[ReadVerdict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=VERDICT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(asdict(row))
    return buf.getvalue()


@dataclass
class CheckResult:
    protocol: str
    verdicts: List[ReadVerdict]
    invariants: InvariantReport
    sessions: Dict[int, SessionVerdict]
    conservation: List[str]
    delay: DelaySummary

    @property
    def contract_failures(self) -> int:
        return sum(1 for v in self.verdicts if not v.contract_ok)

    @property
    def ryw_violations(self) -> int:
        return sum(s.ryw_violations for s in self.sessions.values())

    @property
    def mr_violations(self) -> int:
        return sum(s.mr_violations for s in self.sessions.values())

    def ok(self, sessions_enforced: bool = False) -> bool:
        if self.contract_failures or not self.invariants.ok or self.conservation:
            return False
        if sessions_enforced and (self.ryw_violations or self.mr_violations):
            return False
        return True


def check_log(records: Sequence[Mapping]) -> CheckResult:
    h = History(records)
    return CheckResult(
        protocol=h.protocol.value,
        verdicts=verdicts(h),
        invariants=check_invariants(h),
        sessions=check_sessions(h),
        conservation=check_conservation(h),
        delay=delay_accounting(h),
    )

"""Closed-loop workload generation and experiment reports."""
from __future__ import annotations

import bisect
import copy
import csv
import io
import itertools
import math
import random
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence

from .oracle import History, delay_accounting
from .simnet import SimConfig, TxnSpec, simulate
from .timebase import ConfigError


def zipf_weights(n: int, s: float) -> List[float]:
    return [1.0 / (k + 1) ** s for k in range(n)]


def head_mass(n: int, s: float, head: float = 0.2) -> float:
    w = zipf_weights(n, s)
    cut = max(1, int(round(n * head)))
    return sum(w[:cut]) / sum(w)


def solve_exponent(n: int, head: float = 0.2, mass: float = 0.8) -> float:
    """Zipf exponent giving ``mass`` of the probability to the top ``head`` keys."""
    if n <= 1 or head_mass(n, 0.0, head) >= mass:
        return 0.0
    lo, hi = 0.0, 1.0
    while head_mass(n, hi, head) < mass:
        hi *= 2
        if hi > 64:
            break
    for _ in range(60):
        mid = (lo + hi) / 2
        if head_mass(n, mid, head) < mass:
            lo = mid
        else:
            hi = mid
    return hi


@dataclass
class WorkloadConfig:
    keyspace: int = 1024
    value_size: int = 100
    reads_per_round: int = 20
    rounds: int = 1
    updates_per_txn: int = 5
    hot_fraction: float = 0.2
    hot_mass: float = 0.8
    warmup: float = 0.1
    _cum: Optional[List[float]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("keyspace", "value_size", "reads_per_round", "rounds", "updates_per_txn"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.reads_per_round > self.keyspace:
            raise ConfigError("reads_per_round exceeds keyspace")
        if self.updates_per_txn > self.reads_per_round * self.rounds:
            raise ConfigError("updates_per_txn exceeds keys read by the preceding transaction")
        if not 0 < self.hot_fraction <= 1 or not 0 < self.hot_mass <= 1:
            raise ConfigError("hot fraction and mass must lie in (0, 1]")
        if not 0 <= self.warmup < 1:
            raise ConfigError("warmup must lie in [0, 1)")

    @property
    def exponent(self) -> float:
        return solve_exponent(self.keyspace, self.hot_fraction, self.hot_mass)

    def cumulative(self) -> List[float]:
        if self._cum is None:
            self._cum = list(itertools.accumulate(zipf_weights(self.keyspace, self.exponent)))
        return self._cum

    def sample_key(self, rng: random.Random) -> int:
        cum = self.cumulative()
        return bisect.bisect_left(cum, rng.random() * cum[-1])

    def sample_distinct(self, rng: random.Random, k: int) -> List[int]:
        out: Dict[int, None] = {}
        while len(out) < k:
            out[self.sample_key(rng)] = None
        return list(out)

    def header(self) -> Dict:
        d = asdict(self)
        d.pop("_cum")
        d["exponent"] = round(self.exponent, 6)
        return d

    def client_stream(self, cid: int, rng: random.Random) -> Iterator[TxnSpec]:
        return gen_client_loop(self, rng)


def gen_client_loop(cfg: WorkloadConfig, rng: random.Random) -> Iterator[TxnSpec]:
    """Read-only transaction, then blind writes over a subset of what it read."""
    while True:
        rounds = [cfg.sample_distinct(rng, cfg.reads_per_round) for _ in range(cfg.rounds)]
        yield TxnSpec(rounds=rounds)
        read_keys = list(dict.fromkeys(k for r in rounds for k in r))
        keys = rng.sample(read_keys, min(cfg.updates_per_txn, len(read_keys)))
        yield TxnSpec(writes=[(k, rng.randbytes(cfg.value_size)) for k in keys])


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile; 0 for an empty sample."""
    if not values:
        return 0.0
    xs = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(xs)))
    return float(xs[rank - 1])


REPORT_FIELDS = [
    "protocol", "seed", "txns", "read_txns", "reads", "update_rate",
    "p50_read_latency", "p99_read_latency", "stale_fraction", "mv_overhead",
    "max_wait", "deferred_clock_skew", "deferred_pending_commit", "drained",
]


def summarize(log, protocol: str, seed: int, warmup: float = 0.0, drained=None) -> Dict:
    h = History(log)
    end_t = max((r["t"] for r in log), default=0)
    since = int(end_t * warmup)
    lat = []
    reads = writes = txns = read_txns = 0
    for tv in h.txns.values():
        if tv.start_t is None or tv.start_t < since:
            continue
        txns += 1
        writes += len(tv.write_keys) if tv.committed else 0
        if tv.kind == "read" and tv.reads_done_t is not None:
            read_txns += 1
            lat.append(tv.reads_done_t - tv.start_t)
    d = delay_accounting(h, since_t=since)
    reads = d.reads
    ops = reads + writes
    return {
        "protocol": protocol,
        "seed": seed,
        "txns": txns,
        "read_txns": read_txns,
        "reads": reads,
        "update_rate": round(writes / ops, 6) if ops else 0.0,
        "p50_read_latency": percentile(lat, 50),
        "p99_read_latency": percentile(lat, 99),
        "stale_fraction": d.stale_fraction,
        "mv_overhead": d.mv_overhead,
        "max_wait": d.max_wait,
        "deferred_clock_skew": d.deferrals.get("clock-skew", 0),
        "deferred_pending_commit": d.deferrals.get("pending-commit", 0),
        "drained": drained,
    }


def run_experiment(sim: SimConfig, workload: WorkloadConfig, protocols: Sequence[str],
                   seeds: Sequence[int] = (0,), keep_logs: bool = False):
    rows, logs = [], {}
    for proto in protocols:
        for seed in seeds:
            cfg = replace(copy.deepcopy(sim), protocol=proto, seed=seed, workload=workload)
            s = simulate(cfg)
            rows.append(summarize(s.log_records, cfg.protocol, seed, workload.warmup, s.drained))
            if keep_logs:
                logs[(proto, seed)] = s.log_records
    return (rows, logs) if keep_logs else rows


def rows_csv(rows: Sequence[Dict], fields: Sequence[str] = REPORT_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def aggregate(rows: Sequence[Dict]) -> List[Dict]:
    """Mean of numeric columns per protocol, weighting stale fraction by reads."""
    by: Dict[str, List[Dict]] = {}
    for r in rows:
        by.setdefault(r["protocol"], []).append(r)
    out = []
    for proto, rs in by.items():
        reads = sum(int(r["reads"]) for r in rs)
        stale = sum(float(r["stale_fraction"]) * int(r["reads"]) for r in rs)
        agg = {"protocol": proto, "seed": "all", "drained": all(str(r["drained"]) == "True" for r in rs)}
        for f in REPORT_FIELDS:
            if f in agg or f == "protocol":
                continue
            vals = [float(r[f]) for r in rs]
            agg[f] = sum(vals) if f in ("txns", "read_txns", "reads", "deferred_clock_skew",
                                         "deferred_pending_commit") else sum(vals) / len(vals)
        agg["stale_fraction"] = stale / reads if reads else 0.0
        out.append(agg)
    return out

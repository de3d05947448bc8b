"""Periodic stable-time computation and ct-ordered cross-site propagation.

Each handler takes the receiving :class:`~tccsim.partition.PartitionServer`
and mutates its watermarks.  The helpers at the top are pure and carry the
arithmetic.
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Iterable, List, Sequence, Tuple

from .store import Protocol
from .timebase import vv_leq, vv_min_all

if TYPE_CHECKING:  # pragma: no cover
    from .partition import PartitionServer


class ProtocolViolation(RuntimeError):
    """A channel delivered updates out of commit-time order."""


def compute_stable(prepared_times: Iterable[int], clock_value: int) -> int:
    times = list(prepared_times)
    if times:
        return min(times) - 1
    return clock_value


def split_sendable(to_send: Sequence[Tuple], stable: int):
    """Split a ct-sorted queue into (sendable, retained) at ``ct <= stable``."""
    i = 0
    while i < len(to_send) and to_send[i][0] <= stable:
        i += 1
    return list(to_send[:i]), list(to_send[i:])


def tick(p: "PartitionServer") -> int:
    clock_value = p.clock.read()
    stable = compute_stable((e.time for e in p.prepared.values()), clock_value)
    # A local entry never moves backwards even if a late clock lags a
    # previous min-prepared bound.
    stable = max(stable, p.vec[p.site])
    p.vec[p.site] = stable
    vec = tuple(p.vec)
    for k in range(p.n_parts):
        if k != p.part:
            p.net.send_partition(p, p.site, k, "on_stable", p.part, vec, link="intra")
    if p.protocol is Protocol.CV:
        # Visibility is immediate; ordering by ct is meaningless under CV.
        sendable, p.to_send = list(p.to_send), []
    else:
        sendable, p.to_send = split_sendable(p.to_send, stable)
    remote_sites = [j for j in range(p.m) if j != p.site]
    for ct, txn, upds, dep in sendable:
        for j in remote_sites:
            p.net.send_partition(p, j, p.part, "on_remote_updates", p.site, txn, upds, dep, ct, link="cross")
    if not sendable or p.heartbeat_with_updates:
        for j in remote_sites:
            p.net.send_partition(p, j, p.part, "on_heartbeat", p.site, stable, link="cross")
    p.peer_vecs[p.part] = vec
    _recompute_sv(p)
    p.net.log(
        "stable-tick", site=p.site, part=p.part, stable=stable,
        vec=list(p.vec), sv=list(p.sv), sent=len(sendable),
    )
    return stable


def _recompute_sv(p: "PartitionServer") -> bool:
    if len(p.peer_vecs) < p.n_parts:
        return False
    candidate = vv_min_all(p.peer_vecs.values())
    changed = False
    for i, x in enumerate(candidate):
        if x > p.sv[i]:
            p.sv[i] = x
            changed = True
    if changed:
        p.on_sv_change()
    return changed


def on_stable(p: "PartitionServer", from_part: int, vec: Sequence[int]) -> None:
    prev = p.peer_vecs.get(from_part)
    if prev is not None and not vv_leq(prev, vec):
        raise ProtocolViolation(f"stable vector regressed from part {from_part}")
    p.peer_vecs[from_part] = tuple(vec)
    if _recompute_sv(p):
        p.net.log("stable-recv", site=p.site, part=p.part, src=from_part, sv=list(p.sv))


def on_remote_updates(p: "PartitionServer", from_site: int, txn: int, upds, dep, ct: int) -> None:
    if from_site == p.site:
        return
    if p.protocol is not Protocol.CV:
        last = p.last_remote_ct[from_site]
        if ct < last:
            raise ProtocolViolation(
                f"site {from_site} -> p{p.site}.{p.part}: ct {ct} after {last}"
            )
        p.last_remote_ct[from_site] = ct
    installed, evicted = p.store.update_versions(
        upds, dep, ct, from_site, txn, local=False, pins=p.gc_pins()
    )
    if ct > p.vec[from_site]:
        p.vec[from_site] = ct
    p.net.log(
        "deliver-remote", site=p.site, part=p.part, src=from_site, txn=txn, ct=ct,
        dep=list(dep), keys=sorted({k for k, _ in upds}), installed=[v.key for v in installed],
    )
    p.log_evictions(evicted)


def on_heartbeat(p: "PartitionServer", from_site: int, stable: int) -> None:
    if from_site == p.site:
        return
    if stable > p.vec[from_site]:
        p.vec[from_site] = stable
    p.net.log("heartbeat-recv", site=p.site, part=p.part, src=from_site, stable=stable)

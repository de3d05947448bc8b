"""Per-partition multi-version storage and protocol-specific version selection."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .timebase import ConfigError, VersionVector, vv_leq, with_entry, zero


class Protocol(str, enum.Enum):
    CV = "CV"
    OP = "OP"
    AV = "AV"
    CURE = "CURE"
    # Strawman: always serves the chain head, tracks dependencies like OP.
    LATEST = "LATEST"

    @classmethod
    def parse(cls, name) -> "Protocol":
        if isinstance(name, Protocol):
            return name
        key = str(name).strip().upper().replace("-", "_")
        if key == "LATEST_ALWAYS":
            key = "LATEST"
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown protocol {name!r}") from None

    @property
    def multi_version(self) -> bool:
        return self is not Protocol.CV


class StoreError(RuntimeError):
    pass


INITIAL_TXN = 0


@dataclass(frozen=True)
class ObjectVersion:
    key: int
    value: bytes
    dep: VersionVector
    cv: VersionVector
    ct: int
    origin: int
    txn: int = INITIAL_TXN

    @property
    def vid(self) -> Tuple[int, int]:
        return (self.key, self.txn)

    @property
    def recency(self) -> Tuple[int, int]:
        return (self.ct, self.origin)

    @property
    def is_initial(self) -> bool:
        return self.txn == INITIAL_TXN


def make_version(key, value, dep, ct, origin, txn) -> ObjectVersion:
    return ObjectVersion(key, value, tuple(dep), with_entry(dep, origin, ct), ct, origin, txn)


def initial_version(key, m: int) -> ObjectVersion:
    z = zero(m)
    return ObjectVersion(key, b"", z, z, 0, 0, INITIAL_TXN)


def recency_less(a: ObjectVersion, b: ObjectVersion) -> bool:
    return (a.ct, a.origin) < (b.ct, b.origin)


def cond(v: ObjectVersion, ss: Sequence[int], protocol: Protocol) -> bool:
    if protocol in (Protocol.CV, Protocol.LATEST):
        return True
    if protocol is Protocol.OP:
        return vv_leq(v.dep, ss)
    return vv_leq(v.cv, ss)


@dataclass
class VersionChain:
    key: int
    versions: List[ObjectVersion] = field(default_factory=list)  # newest first

    def head(self) -> ObjectVersion:
        return self.versions[0]

    def __len__(self) -> int:
        return len(self.versions)

    def insert(self, v: ObjectVersion) -> bool:
        vs = self.versions
        for existing in vs:
            if existing.txn == v.txn and existing.cv == v.cv:
                return False
        i = 0
        while i < len(vs) and recency_less(v, vs[i]):
            i += 1
        vs.insert(i, v)
        return True

    def select(self, ss, protocol: Protocol) -> Tuple[ObjectVersion, int]:
        """Newest version satisfying ``cond`` and the number of newer ones skipped."""
        for skipped, v in enumerate(self.versions):
            if cond(v, ss, protocol):
                return v, skipped
        raise StoreError(f"no version of key {self.key} visible at {tuple(ss)}")


def gc(chain: VersionChain, pins=None, max_versions: int = 50, keep: int = 20,
       protocol: Protocol = Protocol.AV) -> List[ObjectVersion]:
    """Truncate a long chain to its ``keep`` newest versions.

    ``pins`` is a snapshot vector or a list of them (the stable vector and
    the snapshots of running transactions).  The version each pin selects is
    retained as well, so a reader never loses its visible version halfway
    through a transaction.  Returns the evicted versions.
    """
    vs = chain.versions
    if len(vs) <= max_versions:
        return []
    if pins is None:
        pins = []
    elif pins and not isinstance(pins[0], (tuple, list)):
        pins = [pins]
    guards = set()
    for pin in pins:
        for v in vs:
            if cond(v, pin, protocol):
                guards.add(id(v))
                break
    kept = vs[:keep] + [v for v in vs[keep:] if id(v) in guards]
    evicted = [v for v in vs[keep:] if id(v) not in guards]
    chain.versions = kept
    return evicted


class Store:
    """All chains held by one partition replica."""

    def __init__(self, m: int, protocol: Protocol, max_versions: int = 50, keep: int = 20):
        self.m = m
        self.protocol = Protocol.parse(protocol)
        self.max_versions = max_versions
        self.keep = keep
        self.chains: Dict[int, VersionChain] = {}

    def chain(self, key) -> VersionChain:
        c = self.chains.get(key)
        if c is None:
            c = VersionChain(key, [initial_version(key, self.m)])
            self.chains[key] = c
        return c

    def read_version(self, key, ss, protocol: Optional[Protocol] = None) -> ObjectVersion:
        return self.chain(key).select(ss, protocol or self.protocol)[0]

    def read_with_skips(self, key, ss) -> Tuple[ObjectVersion, int]:
        return self.chain(key).select(ss, self.protocol)

    def update_versions(
        self,
        upds: Iterable[Tuple[int, bytes]],
        dep,
        ct: int,
        origin: int,
        txn: int,
        local: bool = True,
        pins=None,
    ) -> Tuple[List[ObjectVersion], List[ObjectVersion]]:
        """Install one transaction's updates.  Returns (installed, evicted).

        Repeated updates to one key inside ``upds`` are applied in order, so
        the register keeps the last value.
        """
        if local and ct <= dep[origin]:
            raise StoreError(f"commit time {ct} not above dep[{origin}]={dep[origin]}")
        final: Dict[int, bytes] = {}
        for k, val in upds:
            final[k] = val
        installed, evicted = [], []
        for k, val in final.items():
            v = make_version(k, val, dep, ct, origin, txn)
            c = self.chain(k)
            if not self.protocol.multi_version:
                # Single-version register: last writer (by recency) wins.
                if recency_less(c.head(), v) or c.head().is_initial:
                    c.versions = [v]
                    installed.append(v)
                continue
            if c.insert(v):
                installed.append(v)
                evicted.extend(gc(c, pins, self.max_versions, self.keep, self.protocol))
        return installed, evicted

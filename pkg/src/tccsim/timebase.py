"""Vector clocks and skewed per-server physical clocks.

Version vectors are plain tuples of ints, one entry per site.  Mutable
watermarks (a partition's delivery vector, its stable vector) are kept as
lists and advanced through :func:`advance`, which refuses to move an entry
backwards.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

VersionVector = tuple


class ConfigError(ValueError):
    """Raised for malformed configuration, including vector length mismatch."""


def zero(m: int) -> VersionVector:
    return (0,) * m


def _check(a: Sequence[int], b: Sequence[int]) -> None:
    if len(a) != len(b):
        raise ConfigError(f"vector length mismatch: {len(a)} != {len(b)}")


def vv_leq(a: Sequence[int], b: Sequence[int]) -> bool:
    _check(a, b)
    return all(x <= y for x, y in zip(a, b))


def vv_max(a: Sequence[int], b: Sequence[int]) -> VersionVector:
    _check(a, b)
    return tuple(x if x >= y else y for x, y in zip(a, b))


def vv_min(a: Sequence[int], b: Sequence[int]) -> VersionVector:
    _check(a, b)
    return tuple(x if x <= y else y for x, y in zip(a, b))


def vv_max_all(vectors, m: int) -> VersionVector:
    out = zero(m)
    for v in vectors:
        out = vv_max(out, v)
    return out


def vv_min_all(vectors) -> VersionVector:
    it = iter(vectors)
    out = tuple(next(it))
    for v in it:
        out = vv_min(out, v)
    return out


def with_entry(v: Sequence[int], i: int, value: int) -> VersionVector:
    out = list(v)
    out[i] = value
    return tuple(out)


def advance(target: list, i: int, value: int) -> bool:
    """Raise ``target[i]`` to ``value`` if larger.  Returns True on change."""
    if value > target[i]:
        target[i] = value
        return True
    return False


@dataclass
class SiteClock:
    """Physical clock of one server: simulation time plus a fixed skew.

    ``jitter`` adds a bounded per-read perturbation drawn from ``rng``.  Reads
    are clamped so that a server never observes its clock going backwards.
    """

    site: int
    now: Callable[[], int]
    offset: int = 0
    jitter: int = 0
    rng: Optional[random.Random] = None
    last: int = field(default=-(2**62))

    def read(self) -> int:
        t = self.now() + self.offset
        if self.jitter and self.rng is not None:
            t += self.rng.randint(-self.jitter, self.jitter)
        if t < self.last:
            t = self.last
        self.last = t
        return t

    def peek(self) -> int:
        """Best-effort current reading without consuming jitter randomness."""
        return max(self.now() + self.offset, self.last)


def clock_read(clock: SiteClock) -> int:
    return clock.read()

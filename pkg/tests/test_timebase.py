import pytest
from hypothesis import given, strategies as st

from tccsim.timebase import (
    ConfigError, SiteClock, advance, clock_read, vv_leq, vv_max, vv_max_all, vv_min, vv_min_all, with_entry, zero,
)

vectors = st.lists(st.integers(0, 50), min_size=3, max_size=3).map(tuple)


def test_vv_leq_examples():
    assert vv_leq([2, 0], [4, 3])
    assert not vv_leq([5, 0], [4, 3])
    assert vv_leq((1, 2), (1, 2))


def test_vv_max_examples():
    assert vv_max([3, 2], [1, 5]) == (3, 5)
    assert vv_max((4, 7), zero(2)) == (4, 7)
    assert vv_max((4, 7), (4, 7)) == (4, 7)


def test_length_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        vv_leq([1, 2], [1, 2, 3])
    with pytest.raises(ConfigError):
        vv_max([1], [1, 2])


def test_helpers():
    assert with_entry((1, 2, 3), 1, 9) == (1, 9, 3)
    assert vv_min_all([(5, 3), (7, 2)]) == (5, 2)
    assert vv_max_all([(5, 3), (7, 2)], 2) == (7, 3)
    assert vv_min((1, 4), (2, 3)) == (1, 3)
    w = [3, 3]
    assert advance(w, 0, 5) and w == [5, 3]
    assert not advance(w, 1, 2) and w == [5, 3]


@given(vectors, vectors, vectors)
def test_leq_is_partial_order(a, b, c):
    assert vv_leq(a, a)
    if vv_leq(a, b) and vv_leq(b, a):
        assert a == b
    if vv_leq(a, b) and vv_leq(b, c):
        assert vv_leq(a, c)


@given(vectors, vectors, vectors)
def test_max_is_least_upper_bound(a, b, c):
    m = vv_max(a, b)
    assert vv_leq(a, m) and vv_leq(b, m)
    if vv_leq(a, c) and vv_leq(b, c):
        assert vv_leq(m, c)


def test_clock_read_examples():
    now = [100]
    assert clock_read(SiteClock(0, lambda: now[0])) == 100
    c = SiteClock(0, lambda: now[0], offset=-5)
    assert c.read() == 95
    c2 = SiteClock(0, lambda: now[0], offset=-5)
    now[0] = 105
    assert c2.read() == 100
    now[0] = 100
    assert c2.read() == 100  # prior read was 100 >= 96, so it sticks


@given(st.integers(-20, 20), st.integers(0, 5), st.lists(st.integers(-10, 30), min_size=1, max_size=30),
       st.integers(0, 1000))
def test_clock_monotonic_under_any_skew(offset, jitter, steps, seed):
    import random

    now = [0]
    c = SiteClock(0, lambda: now[0], offset, jitter, random.Random(seed))
    prev = None
    for d in steps:
        now[0] = max(0, now[0] + d)  # sim time itself may be probed out of order
        r = c.read()
        if prev is not None:
            assert r >= prev
        prev = r

import pytest
from hypothesis import given, strategies as st

from tccsim.store import (
    ObjectVersion, Protocol, Store, StoreError, VersionChain, cond, gc, initial_version, make_version,
    recency_less,
)


def v(key=1, dep=(0, 0), ct=1, origin=0, txn=1):
    return make_version(key, b"v", dep, ct, origin, txn)


def test_recency_order():
    assert recency_less(v(ct=3, origin=0), v(ct=5, origin=1))
    assert recency_less(v(ct=5, origin=0), v(ct=5, origin=1))
    a = v(ct=4)
    assert not recency_less(a, a)


def test_cond_examples():
    hot = ObjectVersion(1, b"", (9, 9), (9, 9), 9, 0, 5)
    assert cond(hot, (0, 0), Protocol.CV)
    assert cond(ObjectVersion(1, b"", (0, 0), (2, 0), 2, 0, 1), (4, 3), Protocol.AV)
    assert not cond(ObjectVersion(1, b"", (0, 0), (5, 0), 5, 0, 1), (4, 3), Protocol.AV)
    relaxed = ObjectVersion(1, b"", (1, 0), (6, 0), 6, 0, 1)
    assert cond(relaxed, (4, 3), Protocol.OP)
    assert not cond(relaxed, (4, 3), Protocol.AV)


def test_make_version_materialises_cv():
    x = make_version(1, b"a", (3, 2), 6, 0, 7)
    assert x.cv == (6, 2) and x.dep == (3, 2)


def chain_x():
    s = Store(2, Protocol.AV)
    for i, ct in enumerate((1, 3, 5), start=1):
        s.update_versions([(1, b"%d" % ct)], (0, 0), ct, 0, i)
    return s


def test_read_version_examples():
    s = chain_x()
    assert s.read_version(1, (4, 4)).cv == (3, 0)
    assert s.read_version(1, (4, 4), Protocol.CV).cv == (5, 0)
    fresh = Store(2, Protocol.AV)
    for p in Protocol:
        assert fresh.read_version(9, (7, 7), p).is_initial


def test_read_with_skips_counts_newer_versions():
    s = chain_x()
    got, skipped = s.read_with_skips(1, (4, 4))
    assert got.ct == 3 and skipped == 1


def test_cv_replaces_chain():
    s = chain_x()
    cv = Store(2, Protocol.CV)
    for i in range(5):
        cv.update_versions([(1, b"x")], (0, 0), i + 1, 0, i + 1)
    assert len(cv.chain(1)) == 1
    cv.update_versions([(1, b"y")], (0, 0), 9, 0, 9)
    assert len(cv.chain(1)) == 1 and cv.chain(1).head().ct == 9
    assert len(s.chain(1)) == 4


def test_cv_keeps_recency_winner():
    cv = Store(2, Protocol.CV)
    cv.update_versions([(1, b"new")], (0, 0), 9, 1, 2, local=False)
    installed, _ = cv.update_versions([(1, b"old")], (0, 0), 4, 0, 3)
    assert installed == [] and cv.chain(1).head().ct == 9


def test_duplicate_insert_is_idempotent():
    s = chain_x()
    before = list(s.chain(1).versions)
    installed, _ = s.update_versions([(1, b"5")], (0, 0), 5, 0, 3, local=False)
    assert installed == [] and s.chain(1).versions == before


def test_local_commit_requires_ct_above_dep():
    s = Store(2, Protocol.AV)
    with pytest.raises(StoreError):
        s.update_versions([(1, b"x")], (4, 0), 4, 0, 1)


def test_repeated_key_keeps_last_value():
    s = Store(2, Protocol.AV)
    s.update_versions([(1, b"a"), (1, b"b")], (0, 0), 1, 0, 1)
    assert s.chain(1).head().value == b"b" and len(s.chain(1)) == 2


def long_chain(n):
    c = VersionChain(1, [initial_version(1, 2)])
    for i in range(1, n):
        c.insert(v(ct=i, txn=i))
    return c


def test_gc_thresholds():
    c = long_chain(51)
    evicted = gc(c)
    assert len(c) == 20 and len(evicted) == 31
    assert [x.ct for x in c.versions] == list(range(50, 30, -1))
    c = long_chain(50)
    assert gc(c) == [] and len(c) == 50
    c = long_chain(3)
    assert gc(c) == [] and len(c) == 3


def test_gc_keeps_pinned_versions():
    c = long_chain(51)
    gc(c, pins=[(0, 0), (10, 0)])
    cts = {x.ct for x in c.versions}
    assert 0 in cts and 10 in cts and len(c) == 22


@given(st.lists(st.tuples(st.integers(1, 40), st.integers(0, 1)), min_size=1, max_size=80, unique=True))
def test_chain_sorted_newest_first_and_bounded(items):
    s = Store(2, Protocol.AV)
    for txn, (ct, origin) in enumerate(items, start=1):
        s.update_versions([(1, b"x")], (0, 0), ct, origin, txn, local=False)
        vs = s.chain(1).versions
        assert all(not recency_less(a, b) for a, b in zip(vs, vs[1:]))
        assert 1 <= len(vs) <= 50
        for x in vs:
            assert x.cv[x.origin] == x.ct and x.ct > x.dep[x.origin] or x.is_initial


@given(st.lists(st.tuples(st.integers(1, 30), st.integers(0, 1)), min_size=1, max_size=30, unique=True),
       st.tuples(st.integers(0, 30), st.integers(0, 30)))
def test_read_version_satisfies_cond(items, ss):
    for proto in (Protocol.AV, Protocol.OP):
        s = Store(2, proto)
        for txn, (ct, origin) in enumerate(items, start=1):
            dep = (0, 0) if origin else (0, ct // 2)
            s.update_versions([(1, b"x")], dep, ct, origin, txn, local=False)
        got = s.read_version(1, ss)
        if proto is Protocol.AV:
            assert all(a <= b for a, b in zip(got.cv, ss))
        else:
            assert all(a <= b for a, b in zip(got.dep, ss))


def test_protocol_parse():
    assert Protocol.parse("latest-always") is Protocol.LATEST
    assert Protocol.parse("cure") is Protocol.CURE
    with pytest.raises(ValueError):
        Protocol.parse("2PL")

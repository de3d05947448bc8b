import functools

from hypothesis import given, settings
from hypothesis import strategies as st

from tccsim.bench import WorkloadConfig
from tccsim.oracle import (
    History, VersionGraph, brute_atomic, brute_order_preserving, check_atomic, check_compatible,
    check_log, check_order_preserving, delay_accounting, find_broken_read, find_gap,
    freshness_class, is_strict_partial_order, precedence_relation, replay_staleness,
    staleness, version_precedes, verdicts_csv,
)
from tccsim.scenarios import run_script
from tccsim.simnet import HistoryLog, SimConfig, simulate
from tccsim.store import initial_version, make_version

X, Y, Z = 0, 1, 2


def graph(*versions, m=1, keys=(X, Y, Z)):
    g = VersionGraph(m)
    g.ensure_initial(keys)
    for v in versions:
        g.add(v)
    return g


def test_version_precedes():
    u = make_version(X, b"", (1, 0), 2, 0, 1)
    v = make_version(Y, b"", (3, 1), 4, 0, 2)
    assert u.cv == (2, 0) and version_precedes(u, v)
    assert not version_precedes(v, u)
    a = make_version(X, b"", (3, 1), 4, 0, 5)
    b = make_version(Y, b"", (3, 1), 4, 0, 5)
    assert not version_precedes(a, b) and not version_precedes(b, a)
    assert version_precedes(initial_version(X, 2), v)
    assert not version_precedes(v, initial_version(X, 2))


# x_i by T1, then y_j and z_k together by T2 which depends on x_i
XI = make_version(X, b"", (0,), 1, 0, 1)
YJ = make_version(Y, b"", (1,), 2, 0, 2)
ZK = make_version(Z, b"", (1,), 2, 0, 2)
BOT = {k: initial_version(k, 1) for k in (X, Y, Z)}


def test_gap_from_initial_version():
    g = graph(XI, YJ, ZK)
    assert not check_order_preserving([BOT[X], YJ], g)
    assert find_gap([BOT[X], YJ], g) == (BOT[X], XI, YJ)


def test_order_preserving_but_broken_read():
    g = graph(XI, YJ, ZK)
    rs = [XI, YJ, BOT[Z]]
    assert check_order_preserving(rs, g)
    assert not check_atomic(rs, g)
    assert find_broken_read(rs, g) == (YJ, ZK, BOT[Z])


def test_full_writer_read_is_atomic():
    g = graph(XI, YJ, ZK)
    assert check_atomic([XI, YJ, ZK], g) and check_order_preserving([XI, YJ, ZK], g)


def test_trivial_readsets():
    g = graph(XI, YJ, ZK)
    assert check_order_preserving([YJ], g)
    solo = [XI, BOT[Y]]
    assert check_atomic(solo, g) == check_order_preserving(solo, g)


def test_compatible():
    xo = make_version(X, b"", (0,), 1, 0, 1)
    yo = make_version(Y, b"", (0,), 1, 0, 1)
    xu = make_version(X, b"", (1,), 2, 0, 2)
    yv = make_version(Y, b"", (2,), 3, 0, 3)
    g = graph(xo, yo, xu, yv)
    assert check_compatible(xu, [xo, yo], g)
    assert not check_compatible(yv, [xo, yo], g)
    assert check_compatible(xo, [xo, yo], g)


def test_staleness():
    vs = [make_version(X, b"", (0,), ct, 0, ct) for ct in (1, 2, 3)]
    assert staleness(vs[2], vs) == 0
    assert staleness(vs[1], vs) == 1
    assert staleness(vs[0], vs[:1]) == 0


# -- brute force agreement ----------------------------------------------------


@st.composite
def random_histories(draw):
    """Random causally consistent version sets over a few keys and sites."""
    m = draw(st.integers(1, 3))
    keys = list(range(draw(st.integers(1, 4))))
    versions = [initial_version(k, m) for k in keys]
    clocks = [0] * m
    for txn in range(1, draw(st.integers(0, 8)) + 1):
        site = draw(st.integers(0, m - 1))
        deps = draw(st.lists(st.sampled_from(versions), max_size=3))
        dep = tuple(max([0] + [d.cv[i] for d in deps]) for i in range(m))
        ct = max(max(dep), clocks[site]) + 1
        clocks[site] = ct
        for k in draw(st.sets(st.sampled_from(keys), min_size=1)):
            versions.append(make_version(k, b"", dep, ct, site, txn))
    readset = [draw(st.sampled_from([v for v in versions if v.key == k])) for k in keys]
    return m, versions, readset


@settings(max_examples=300, deadline=None)
@given(random_histories())
def test_checkers_agree_with_brute_force(h):
    m, versions, readset = h
    g = VersionGraph(m)
    for v in versions:
        g.add(v)
    rel = precedence_relation(versions)
    assert is_strict_partial_order(rel)
    op = check_order_preserving(readset, g)
    assert op == brute_order_preserving(readset, versions, rel)
    assert (op and check_atomic(readset, g)) == brute_atomic(readset, versions, rel)


def test_partial_order_detects_broken_relations():
    assert not is_strict_partial_order({((0, 1), (0, 1))})
    assert not is_strict_partial_order({((0, 1), (1, 1)), ((1, 1), (2, 1))})


# -- whole-log checks -----------------------------------------------------------


@functools.lru_cache(maxsize=None)
def sim_log(protocol, seed=0, **kw):
    kw = {k: list(v) if isinstance(v, tuple) else v for k, v in kw.items()}
    cfg = SimConfig(
        sites=2, parts=3, clients=8, seed=seed, protocol=protocol, stab_period=20, max_txns=150,
        workload=WorkloadConfig(keyspace=64, reads_per_round=8, updates_per_txn=3), **kw,
    )
    return simulate(cfg).log_records


def test_cv_reads_are_latest():
    h = History(sim_log("CV"))
    assert all(freshness_class(h, t) == "latest" for t, tv in h.txns.items() if tv.reads)


def test_av_never_concurrent_and_sessions_clean():
    log = sim_log("AV")
    h = History(log)
    assert all(freshness_class(h, t) != "concurrent" for t, tv in h.txns.items() if tv.reads)
    res = check_log(log)
    assert res.ryw_violations == 0 and res.mr_violations == 0


def test_verdict_hierarchy_and_contracts():
    for proto in ("CV", "OP", "AV", "CURE"):
        res = check_log(sim_log(proto))
        assert res.verdicts
        for v in res.verdicts:
            assert not v.atomic or v.order_preserving
            assert not v.order_preserving or v.committed
        assert res.ok(True), proto
        assert res.invariants.ok and not res.conservation


def test_minimal_delay_for_non_blocking_protocols():
    for proto in ("CV", "OP", "AV"):
        d = delay_accounting(History(sim_log(proto)))
        assert d.max_wait == 0 and d.max_rounds == 1 and not d.deferrals


def test_cure_skew_causes_clock_waits():
    d = delay_accounting(History(sim_log("CURE", skew=5)))
    assert d.deferrals.get("clock-skew", 0) > 0


def test_overhead_baseline():
    d = delay_accounting(History(sim_log("CV")))
    assert d.stale_fraction == 0.0 and d.mv_overhead == 1.0


def test_replayed_staleness_matches_served():
    h = History(sim_log("AV", 1))
    replay = replay_staleness(h)
    served = {r["seq"]: r["skips"] for r in h.records if r["kind"] == "read-resp"}
    assert replay == served


def test_lemma_ff_is_concurrent_under_op():
    h = History(run_script("LEMMA-FF", "OP"))
    readers = [t for t, tv in h.txns.items() if tv.kind == "read"]
    assert [freshness_class(h, t) for t in readers] == ["concurrent"]


def test_ryw_violation_flagged_without_cache():
    assert check_log(run_script("RYW", "AV", session_cache=False)).ryw_violations >= 1
    assert check_log(run_script("RYW", "AV")).ryw_violations == 0


def test_log_round_trip_and_csv(tmp_path):
    log = sim_log("OP")
    path = tmp_path / "op.jsonl"
    log.write(path)
    back = HistoryLog.load(path)
    assert back == log
    res = check_log(back)
    text = verdicts_csv(res.verdicts)
    assert text.splitlines()[0].startswith("txn,client")
    assert len(text.splitlines()) == len(res.verdicts) + 1

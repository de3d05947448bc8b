import pytest
from conftest import FakeNet, Tc, make_partition

from tccsim.stabilisation import ProtocolViolation, compute_stable, split_sendable


def test_compute_stable():
    assert compute_stable([8, 11], 50) == 7
    assert compute_stable([], 12) == 12


def test_split_sendable():
    sent, kept = split_sendable([(5, 1), (9, 2)], 7)
    assert sent == [(5, 1)] and kept == [(9, 2)]


def committed(p, txn, key, ct):
    p.handle_prepare(Tc, txn, [(key, b"v")], (0, 0), 1)
    p.handle_commit(txn, ct)


def test_tick_sends_only_stable_updates_in_ct_order():
    net = FakeNet()
    net.now = 5
    p = make_partition(net, "AV")
    committed(p, 1, 1, 5)
    net.now = 9
    committed(p, 2, 1, 9)
    p.handle_prepare(Tc, 3, [(2, b"v")], (0, 0), 1)  # proposed 9 -> stable 8
    net.now = 20
    assert p.tick() == 8
    ups = net.take("on_remote_updates")
    assert [u[4][-1] for u in ups] == [5]
    assert [e[0] for e in p.to_send] == [9]
    assert p.vec[0] == 8


def test_tick_broadcasts_vec_and_heartbeats():
    net = FakeNet()
    net.now = 12
    p = make_partition(net, "AV", n=3)
    p.tick()
    stables = net.take("on_stable")
    assert sorted(s[2] for s in stables) == [(0, 1), (0, 2)]
    hbs = net.take("on_heartbeat")
    assert [(h[2], h[4]) for h in hbs] == [((1, 0), (0, 12))]


def test_heartbeat_only_when_idle_if_toggle_off():
    net = FakeNet()
    net.now = 5
    p = make_partition(net, "AV", heartbeat_with_updates=False)
    committed(p, 1, 1, 5)
    net.now = 20
    p.tick()
    assert net.take("on_heartbeat") == [] and len(net.take("on_remote_updates")) == 1


def test_on_stable_min():
    net = FakeNet()
    net.now = 5
    p = make_partition(net, "AV", n=2)
    p.vec = [7, 2]
    p.peer_vecs[0] = (7, 2)
    p.on_stable(1, (5, 3))
    assert p.sv == [5, 2]
    p.on_stable(1, (6, 4))
    assert p.sv == [6, 2]


def test_single_partition_site_sv_is_own_vec():
    net = FakeNet()
    net.now = 9
    p = make_partition(net, "AV", n=1)
    p.on_heartbeat(1, 4)
    p.tick()
    assert p.sv == [9, 4]


def test_missing_vectors_leave_sv_unchanged():
    net = FakeNet()
    net.now = 9
    p = make_partition(net, "AV", n=3)
    p.tick()
    p.on_stable(1, (9, 9))
    assert p.sv == [0, 0]


def test_stable_regression_is_violation():
    p = make_partition(FakeNet(), "AV")
    p.on_stable(1, (5, 5))
    with pytest.raises(ProtocolViolation):
        p.on_stable(1, (4, 5))


def test_remote_updates():
    net = FakeNet()
    p = make_partition(net, "AV")
    p.on_remote_updates(1, 10, [(3, b"a")], (0, 0), 5)
    p.on_remote_updates(1, 11, [(3, b"b")], (0, 0), 9)
    assert p.vec[1] == 9
    with pytest.raises(ProtocolViolation):
        p.on_remote_updates(1, 12, [(3, b"c")], (0, 0), 5)


def test_delivered_update_gated_by_sv():
    net = FakeNet()
    p = make_partition(net, "AV")
    p.on_remote_updates(1, 10, [(3, b"a")], (0, 0), 5)
    assert p.store.read_version(3, tuple(p.sv)).is_initial
    cv = make_partition(FakeNet(), "CV")
    cv.on_remote_updates(1, 12, [(3, b"c")], (0, 0), 9)
    cv.on_remote_updates(1, 11, [(3, b"b")], (0, 0), 5)  # CV: any order
    assert cv.store.read_version(3, (0, 0)).ct == 9


def test_heartbeat_max_guard():
    p = make_partition(FakeNet(), "AV")
    p.vec[1] = 5
    p.on_heartbeat(1, 8)
    assert p.vec[1] == 8
    p.on_heartbeat(1, 3)
    assert p.vec[1] == 8
    p.on_heartbeat(0, 100)
    assert p.vec[0] == 0

"""Hand-scripted adversarial schedules.

Each scenario drives a :class:`~tccsim.simnet.Simulation` step by step,
holding chosen messages back and releasing them at the right moment, so
that the interleaving is fixed regardless of latency draws.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Callable, Dict, Optional

from .coordinator import Coordinator
from .simnet import Client, HistoryLog, SimConfig, Simulation, TxnSpec
from .timebase import ConfigError

X, Y = 0, 1
P_X, P_Y = 0, 1


class Script:
    def __init__(self, cfg: SimConfig):
        self.sim = Simulation(cfg)
        self.sim.start_timers()
        self.clients: Dict[int, Client] = {}
        self._holds = []
        self.sim.hold_filter = self._hold

    # -- actors ---------------------------------------------------------------

    def client(self, cid: int, site: int = 0, cache: Optional[bool] = None) -> Client:
        if not 0 <= site < self.sim.cfg.sites:
            raise ConfigError(f"unknown site {site}")
        c = self.clients.get(cid)
        if c is None:
            c = Client(self.sim, cid, site, iter(()))
            c.on_idle = lambda _c: None
            self.clients[cid] = c
            self.sim.clients.append(c)
        return c

    def begin(self, cid: int, spec: TxnSpec, tc_part: int = 0) -> Coordinator:
        self.sim.partition(self.clients[cid].site if cid in self.clients else 0, tc_part)
        return self.client(cid).execute(spec, tc_part)

    # -- message control --------------------------------------------------------

    def hold(self, method: str, txn: int, site: int, part: int) -> None:
        dst = self.sim.partition(site, part).addr
        self._holds.append((method, txn, dst))

    def _matches(self, rule, dst, fn, args) -> bool:
        method, txn, hold_dst = rule
        if dst != hold_dst or getattr(fn, "__name__", None) != method:
            return False
        return txn in (args[1] if method == "handle_read" else args[0],)

    def _hold(self, src, dst, fn, args) -> bool:
        return any(self._matches(r, dst, fn, args) for r in self._holds)

    def release(self, method: str, txn: int, site: int, part: int) -> int:
        rule = (method, txn, self.sim.partition(site, part).addr)
        self._holds = [r for r in self._holds if r != rule]
        return self.sim.release(lambda src, dst, fn, args: self._matches(rule, dst, fn, args))

    # -- driving ------------------------------------------------------------------

    def run_until(self, pred: Callable[[], bool], limit: int = 1_000_000) -> None:
        for _ in range(limit):
            if pred():
                return
            if not self.sim.step():
                break
        if not pred():
            raise RuntimeError("scripted schedule stalled")

    def settle(self) -> None:
        """Deliver every message that is not held back."""
        self.run_until(lambda: self.sim.in_flight == 0)

    def finished(self, tc: Coordinator) -> bool:
        return tc.client.tc is not tc

    def finish(self, tc: Coordinator) -> None:
        self.run_until(lambda: self.finished(tc))

    def logged(self, kind: str, **match) -> bool:
        for r in reversed(self.sim.log_records):
            if r["kind"] == kind and all(r.get(k) == v for k, v in match.items()):
                return True
        return False

    def stabilise(self, rounds: int = 2) -> None:
        """Run stabilisation rounds at every partition right now."""
        for _ in range(rounds):
            for key in sorted(self.sim.partitions):
                self.sim.partitions[key].tick()
            self.settle()

    def log(self) -> HistoryLog:
        return self.sim.log_records


def script_config(protocol: str, **overrides) -> SimConfig:
    base = SimConfig(
        sites=1, parts=2, clients=0, protocol=protocol, stab_period=1_000_000,
        placement={X: P_X, Y: P_Y},
        latency={"intra": (1, 1), "cross": (1, 1), "client": (1, 1)},
    )
    return replace(base, **overrides)


def fig2a(protocol: str, **overrides) -> HistoryLog:
    """x_bot, y_bot < x_k < y_j; the reader sees p_x before x_k and p_y after y_j."""
    s = Script(script_config(protocol, **overrides))
    for cid in range(3):
        s.client(cid)
    reader = s.begin(0, TxnSpec(rounds=[[X, Y]]))
    s.hold("handle_read", reader.txn, 0, P_Y)
    s.run_until(lambda: s.logged("read-resp", txn=reader.txn, part=P_X))
    w1 = s.begin(1, TxnSpec(writes=[(X, b"x_k")]))
    s.finish(w1)
    s.stabilise()
    w2 = s.begin(2, TxnSpec(rounds=[[X]], writes=[(Y, b"y_j")]))
    s.finish(w2)
    s.release("handle_read", reader.txn, 0, P_Y)
    s.finish(reader)
    s.stabilise()
    return s.log()


def fig2b(protocol: str, **overrides) -> HistoryLog:
    """One transaction writes x_k and y_j; the reader races its commit at p_y."""
    s = Script(script_config(protocol, **overrides))
    for cid in range(2):
        s.client(cid)
    writer_txn = s.sim.txn_counter + 1
    s.hold("handle_commit", writer_txn, 0, P_Y)
    w = s.begin(1, TxnSpec(writes=[(X, b"x_k"), (Y, b"y_j")]))
    s.finish(w)
    s.run_until(lambda: s.logged("commit", txn=w.txn, part=P_X))
    s.stabilise()
    reader = s.begin(0, TxnSpec(rounds=[[X, Y]]))
    s.run_until(lambda: s.logged("read-resp", txn=reader.txn, part=P_X))
    s.settle()
    s.release("handle_commit", w.txn, 0, P_Y)
    s.finish(reader)
    s.stabilise()
    return s.log()


def lemma_ff(protocol: str, **overrides) -> HistoryLog:
    """The reader may return x_u, committed after it started, but not y_v."""
    s = Script(script_config(protocol, **overrides))
    for cid in range(4):
        s.client(cid)
    w0 = s.begin(3, TxnSpec(writes=[(X, b"x_o"), (Y, b"y_o")]))
    s.finish(w0)
    s.settle()
    s.stabilise()
    reader_txn = s.sim.txn_counter + 1
    s.hold("handle_read", reader_txn, 0, P_X)
    s.hold("handle_read", reader_txn, 0, P_Y)
    reader = s.begin(0, TxnSpec(rounds=[[X, Y]]))
    s.run_until(lambda: s.logged("txn-begin", txn=reader.txn))
    w1 = s.begin(1, TxnSpec(writes=[(X, b"x_u")]))
    s.finish(w1)
    s.settle()
    w2 = s.begin(2, TxnSpec(rounds=[[X]], writes=[(Y, b"y_v")]))
    s.finish(w2)
    s.settle()
    s.release("handle_read", reader.txn, 0, P_X)
    s.release("handle_read", reader.txn, 0, P_Y)
    s.finish(reader)
    s.stabilise()
    return s.log()


def ryw(protocol: str, **overrides) -> HistoryLog:
    """A client writes x and reads it back before the write is stable."""
    s = Script(script_config(protocol, **overrides))
    s.client(0)
    w = s.begin(0, TxnSpec(writes=[(X, b"mine")]))
    s.finish(w)
    r = s.begin(0, TxnSpec(rounds=[[X]]))
    s.finish(r)
    s.stabilise()
    return s.log()


SCENARIOS = {
    "FIG2A": fig2a,
    "FIG2B": fig2b,
    "LEMMA-FF": lemma_ff,
    "RYW": ryw,
}


def run_script(name: str, protocol: str = "OP", **overrides) -> HistoryLog:
    fn = SCENARIOS.get(name.upper())
    if fn is None:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}")
    return fn(protocol, **overrides)

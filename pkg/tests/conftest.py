import pytest

from tccsim.partition import PartitionServer
from tccsim.store import Protocol
from tccsim.timebase import SiteClock


class FakeNet:
    """Captures everything a partition or coordinator sends."""

    def __init__(self, m=2):
        self.now = 0
        self.events = []
        self.sent = []
        self.timers = []
        self.unreachable = set()
        self.m = m

    def log(self, kind, **fields):
        self.events.append(dict(kind=kind, **fields))

    def kinds(self, kind):
        return [e for e in self.events if e["kind"] == kind]

    def schedule(self, delay, fn, *args):
        self.timers.append((self.now + delay, fn, args))

    def fire_timers(self, until):
        due = sorted((t for t in self.timers if t[0] <= until), key=lambda t: t[0])
        self.timers = [t for t in self.timers if t[0] > until]
        for at, fn, args in due:
            self.now = at
            fn(*args)

    def reply(self, src, tc, method, *args):
        self.sent.append(("reply", src, tc, method, args))

    def send_partition(self, src, site, part, method, *args, link):
        self.sent.append(("partition", src, (site, part), method, args, link))

    def send_to_partition(self, tc, site, part, method, *args):
        self.sent.append(("tc->p", (site, part), method, args))

    def to_client(self, tc, client, method, *args):
        self.sent.append(("client", method, args))

    def reachable(self, site, part):
        return (site, part) not in self.unreachable

    def take(self, method):
        out = [s for s in self.sent if method in s]
        self.sent = [s for s in self.sent if method not in s]
        return out


@pytest.fixture
def fake_net():
    return FakeNet()


def make_partition(net, protocol="AV", site=0, part=0, m=2, n=2, offset=0, **kw):
    clock = SiteClock(site, lambda: net.now, offset)
    return PartitionServer(net, site, part, m, n, Protocol.parse(protocol), clock, **kw)


class Tc:
    """Stand-in coordinator address for partition tests."""

    addr = ("tc", 99)


# criterion number -> "PASS/FAIL line", filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])

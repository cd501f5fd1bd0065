import pytest

from tlcqsc.causality import CausalEndpoint
from tlcqsc.experiment import ExperimentConfig, simulate


class Harness:
    """Drive a single TlcNode by hand: own messages are stamped and self-delivered."""

    def __init__(self, node):
        self.node = node
        self.ep = CausalEndpoint(node.id, node.cfg.n)
        self.sent = []

    def _emit(self, msgs):
        for m in msgs:
            rec = self.ep.stamp(m)
            self.sent.append(rec)
            self._emit(self.node.on_receive(rec))

    def start(self):
        self._emit(self.node.on_start())
        return self

    def feed(self, rec):
        before = len(self.sent)
        self._emit(self.node.on_receive(rec))
        return self.sent[before:]


@pytest.fixture
def harness():
    return lambda node: Harness(node).start()


@pytest.fixture(scope="session")
def smoke_run():
    return simulate(ExperimentConfig(rounds=30, seed=11), 0, record=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from hefl.bus import MessageBus
from hefl.sharing import Dealer, Session


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_session(h=3, seed=0, budget=None, bus=None):
    return Session([f"P{i}" for i in range(h)], Dealer(h, seed, budget, check=True), bus or MessageBus())


@pytest.fixture
def session3():
    return make_session(3)


# acceptance results, one entry per criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key:>2}: {title} -- {detail}")

import pytest

from kitchenil.harness import pipeline as P
from kitchenil.harness.config import load


@pytest.fixture(scope="session")
def cfg():
    return load("default")


@pytest.fixture(scope="session")
def tiny_cfg():
    return load("tiny")


@pytest.fixture(scope="session")
def kitchen(cfg):
    return P.make_kitchen(cfg)


@pytest.fixture(scope="session")
def tasks(cfg):
    return list(cfg.tasks)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)

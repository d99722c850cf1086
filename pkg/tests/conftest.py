import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from graphkv.datasets import scene_graph  # noqa: E402
from graphkv.lm_core import LmConfig, ToyLm  # noqa: E402


@pytest.fixture(scope="session")
def lm():
    return ToyLm(LmConfig())


@pytest.fixture(scope="session")
def small_lm():
    return ToyLm(LmConfig(layers=2, heads=2, dim=16, max_seq=256, soft_dim=16))


@pytest.fixture(scope="session")
def table5():
    return scene_graph()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from qdplan.ppo import PpoConfig, train
from qdplan.world import builtin_maze

TRAIN_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def open_maze():
    return builtin_maze("open")


@pytest.fixture(scope="session")
def trained_runs():
    """Full-length PPO runs on the open maze, one per seed, trained lazily and cached."""
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = train(PpoConfig(seed=seed), builtin_maze("open"))
        return cache[seed]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

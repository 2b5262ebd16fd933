import numpy as np
import pytest

from simplekt.data import ExpandedStep


def random_chunk(rng: np.random.Generator, n_steps: int, n_kcs: int = 5, n_questions: int = 8, max_kcs: int = 2):
    """A KC-expanded chunk of exactly ``n_steps`` steps with random multi-KC interactions."""
    steps = []
    inter = 0
    while len(steps) < n_steps:
        k = int(rng.integers(1, max_kcs + 1))
        q = int(rng.integers(n_questions))
        r = int(rng.integers(2))
        for kc in sorted(rng.choice(n_kcs, size=min(k, n_kcs), replace=False)):
            steps.append(ExpandedStep(int(kc), q, r, len(steps), inter, float(inter)))
        inter += 1
    return steps[:n_steps]


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def pytest_terminal_summary(terminalreporter):
    import sys

    acc = sys.modules.get("test_acceptance")
    if acc is None or not acc.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acc.RESULTS):
        terminalreporter.write_line(acc.RESULTS[n])

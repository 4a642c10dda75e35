import numpy as np
import pytest

from sumtrees.dataset import generate_friedman
from sumtrees.priors import Hyperparameters


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_friedman():
    return generate_friedman(120, p=6, sigma=1.0, seed=3)


@pytest.fixture(scope="session")
def quick_hyper():
    """Short chains for tests that only need a plausible ensemble."""
    return Hyperparameters(num_trees=10, burn_in=50, post_burn_in=100)


@pytest.fixture(scope="session")
def small_model(small_friedman, quick_hyper):
    from sumtrees.inference import fit

    return fit(small_friedman, quick_hyper, seed=11)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

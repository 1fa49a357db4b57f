import numpy as np
import pytest

from finetune_rl import LinearMdp, NoiseModel, gen_separation


def bandit(features, means=None, noise=None):
    """One-state, one-step MDP with the given (A, d) action features."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    A, d = features.shape
    theta = np.zeros((1, d)) if means is None else np.atleast_2d(means)
    return LinearMdp(features[None], np.zeros((0, 1, A, 1)), theta, noise or NoiseModel(), 0)


@pytest.fixture
def orthonormal_bandit():
    return bandit(np.eye(2), [0.5, 0.5])


@pytest.fixture(scope="session")
def separation():
    return gen_separation(0.04, 1)


@pytest.fixture(scope="session")
def separation05():
    return gen_separation(0.05, 1)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

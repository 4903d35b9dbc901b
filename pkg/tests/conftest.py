import numpy as np
import pytest

from mecoffload.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(**kw) -> RunConfig:
    """Desk-scale system with the default rates."""
    base = dict(M=3, N=2, T=20, episodes=2, t_step=4, eval_episodes=2, policy="random", seed=7)
    base.update(kw)
    return RunConfig(**base).validate()


# acceptance criteria report one line each; printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

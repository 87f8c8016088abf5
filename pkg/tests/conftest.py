import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bpfa.model import GlobalSample, Hyperparameters  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_beta(rng, K, D, gamma_obs=None, gamma_w=None):
    return GlobalSample(
        pi=rng.uniform(0.1, 0.9, size=K),
        Phi=rng.normal(0.0, 1.0, size=(K, D)),
        gamma_w=rng.uniform(0.5, 2.0) if gamma_w is None else gamma_w,
        gamma_obs=rng.uniform(0.5, 3.0) if gamma_obs is None else gamma_obs,
    )


@pytest.fixture
def hyper():
    return Hyperparameters(K=4)


# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

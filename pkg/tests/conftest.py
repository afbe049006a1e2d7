import numpy as np
import pytest

from c2fdiff.oracle import GaussianMixtureModel
from c2fdiff.schedule import ContinuousSchedule


@pytest.fixture(scope="session")
def sched():
    return ContinuousSchedule.linear(1000, 1e-4, 0.02)


def single_gaussian_8x8():
    """The single diagonal Gaussian used by the sampler exactness checks."""
    d = 64
    ii = np.arange(d)
    mean = 0.5 * np.sin(0.7 * ii)
    var = np.linspace(0.05, 1.0, d)
    return GaussianMixtureModel([1.0], mean[None], var[None], (1, 8, 8))


@pytest.fixture(scope="session")
def gauss64():
    return single_gaussian_8x8()


ACCEPTANCE: dict = {}


@pytest.fixture
def report_criterion():
    """Record one acceptance line; printed in the terminal summary."""

    def record(cid, passed, detail):
        ACCEPTANCE[cid] = f"{cid} {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE[cid])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[cid])

import numpy as np
import pytest

from smpc.config import REFERENCE_CONFIG
from smpc.model import LtiSystem, NoiseModel, Polytope
from smpc.mpc import CostSpec, assemble

A_REF = np.array(REFERENCE_CONFIG["system"]["A"])
B_REF = np.array(REFERENCE_CONFIG["system"]["B"])
SIGMA_W = np.array(REFERENCE_CONFIG["noise"]["sigma_w"])
Q_REF = np.diag([2.0, 0.1])
R_REF = np.eye(1)
P_REF = np.array([[1.093, 0.554], [0.554, 2.915]])
N_REF = REFERENCE_CONFIG["mpc"]["N"]


@pytest.fixture(scope="session")
def ref_sys():
    return LtiSystem(A_REF, B_REF, 0.05)


@pytest.fixture(scope="session")
def ref_noise():
    return NoiseModel(SIGMA_W)


@pytest.fixture(scope="session")
def ref_X():
    return Polytope.box([-1.0, -2.0], [12.0, 4.0])


@pytest.fixture(scope="session")
def ref_U():
    return Polytope.box([-37.0], [37.0])


@pytest.fixture(scope="session")
def ref_data(ref_sys, ref_noise, ref_X, ref_U):
    """Reference problem at the horizon used for the reference study."""
    return assemble(ref_sys, CostSpec(Q_REF, R_REF), ref_X, ref_U, ref_noise, N_REF, 0.15)


@pytest.fixture(scope="session")
def short_data(ref_sys, ref_noise, ref_X, ref_U):
    return assemble(ref_sys, CostSpec(Q_REF, R_REF), ref_X, ref_U, ref_noise, 10, 0.15)


_ACCEPTANCE: list = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        _ACCEPTANCE.append((report.nodeid.split("::")[-1], report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, dur in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'} {name} ({dur:.1f} s)")

import numpy as np
import pytest

from pfeigen import Dirac, neutron_model, rare_event_model, run_backward, run_forward

HSTAR_PI_4 = 1.1002143947640111  # 4 sqrt(2) / (pi + 2)


def h_star_neutron(x):
    return 4.0 / (np.pi + 2.0) * (np.sin(x) + np.cos(x))


@pytest.fixture(scope="session")
def neutron():
    return neutron_model(np.pi / 2, 1.0, 0.0)


@pytest.fixture(scope="session")
def unit_model():
    return rare_event_model(2.0, 0.0)


@pytest.fixture(scope="session")
def small_neutron_run(neutron):
    traj = run_forward(neutron, 60, 40, Dirac(0.0), seed=11)
    return traj, run_backward(traj)


@pytest.fixture(scope="session")
def small_rare_run():
    model = rare_event_model(2.0, 3.0)
    traj = run_forward(model, 40, 30, Dirac(0.0), seed=5)
    return traj, run_backward(traj)


ACCEPTANCE_LINES = {}


def record_criterion(number, name, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} ({detail})"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])

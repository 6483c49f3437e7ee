import pytest

from stochplatoon.lti import tf
from stochplatoon.platoon import LeaderProfile, PlatoonSpec, build_vehicle_loop

ACCEPTANCE_LINES: list[str] = []

START_FROM_REST = LeaderProfile(kind="piecewise", base_speed=0.0, speed_changes=((0, 1.0),))


def plant():
    return tf([1.0], [1.0, -2.0, 1.0])


def lead_controller(h, gain=1.35, pole=0.89):
    return tf([gain / (1.0 + h), 0.0], [1.0, pole])


def example_spec(h=3.2, N=5, P_d=0.6, leader=START_FROM_REST, **kw):
    return PlatoonSpec(plant(), lead_controller(h), h, N, P_d, leader=leader, **kw)


@pytest.fixture(scope="session")
def stable_loop():
    return build_vehicle_loop(example_spec(3.2))


@pytest.fixture(scope="session")
def unstable_loop():
    return build_vehicle_loop(example_spec(2.4))


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

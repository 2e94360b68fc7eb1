import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occlumesh.body_model import toy_asset

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def asset():
    return toy_asset(seed=0)


@pytest.fixture(scope="session")
def asset3():
    return toy_asset(seed=0, num_joints=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def zero_params(module, *keys):
    """Zero every parameter whose dotted name contains one of ``keys``."""
    for name, p in module.named_parameters():
        if not keys or any(k in name for k in keys):
            p.data = np.zeros_like(p.data)


# One "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed at the
# end of the run so it lands in captured output as well.
ACCEPTANCE: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from subsidysim.population import PlanOffering  # noqa: E402
from subsidysim.regimes import bundled_regime  # noqa: E402

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def ira():
    return bundled_regime("ira")


@pytest.fixture(scope="session")
def aca():
    return bundled_regime("aca")


@pytest.fixture
def simple_plans():
    """One rating area, 2024: silver 300 (lowest) and 320 (benchmark)."""
    return [
        PlanOffering("S1", "silver", "RA1", 2024, 300.0),
        PlanOffering("S2", "silver", "RA1", 2024, 320.0),
        PlanOffering("S3", "silver", "RA1", 2024, 350.0),
        PlanOffering("B1", "bronze", "RA1", 2024, 240.0),
    ]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

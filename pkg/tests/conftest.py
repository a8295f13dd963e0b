import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import SyntheticCategory  # noqa: E402

from morphfit import viewpoint_sphere  # noqa: E402


@pytest.fixture(scope="session")
def category() -> SyntheticCategory:
    # Shared across the whole suite; construction does real kernel work, so
    # build it once.
    return SyntheticCategory()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Surface the acceptance PASS/FAIL lines even when stdout is captured.
    try:
        from test_acceptance import ACCEPTANCE_LINES
    except ImportError:
        return
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def eval_views(category):
    # Reduced resolution keeps the end-to-end sweeps inside the suite's
    # time budget without changing any pipeline semantics.
    width = 96
    focal = 275.0 * width / 256.0
    return viewpoint_sphere(
        20, radius=4.0 * category.radius,
        focal=(focal, focal), resolution=(width, 72),
    )

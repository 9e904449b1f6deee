import re

import numpy as np
import pytest

from pcqa.cloud import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(n, seed=0, colors=True, source_id="rand"):
    r = np.random.default_rng(seed)
    pos = r.normal(size=(n, 3))
    col = r.integers(0, 256, size=(n, 3), dtype=np.uint8) if colors else None
    return PointCloud(pos, col, source_id)


@pytest.fixture
def cloud_factory():
    return random_cloud


# -- acceptance summary -------------------------------------------------------

# criterion number -> measured detail, filled in by test_acceptance.py
ACCEPTANCE_DETAILS: dict = {}
_ACCEPTANCE_OUTCOMES: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(re.match(r"\d+", name.split("_")[2]).group())
    if report.when == "call" or report.outcome != "passed":
        prev = _ACCEPTANCE_OUTCOMES.get(n)
        if prev in (None, "passed"):
            _ACCEPTANCE_OUTCOMES[n] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE_OUTCOMES):
        verdict = "PASS" if _ACCEPTANCE_OUTCOMES[n] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {ACCEPTANCE_DETAILS.get(n, '(no measurement)')}")

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ldpcstore.codec import TannerGraph, deployment_graph  # noqa: E402

# set LDPCSTORE_FULL=1 for the exhaustive variants of the slow checks
FULL = os.environ.get("LDPCSTORE_FULL", "") not in ("", "0")


@pytest.fixture(scope="session")
def deploy():
    return deployment_graph()


@pytest.fixture
def fig2():
    # three data blocks, c1 = d1 + d2 and c2 = d2 + d3 (0-based: {0,1}, {1,2})
    return TannerGraph.from_edges(3, [{0, 1}, {1, 2}])


@pytest.fixture
def tiny():
    return TannerGraph.from_edges(2, [{0, 1}])


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

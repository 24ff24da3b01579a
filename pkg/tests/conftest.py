from pathlib import Path

import numpy as np
import pytest

from editroute import Edit, EditingSystem, NgramEmbedder
from editroute.backends import MockAlignedBackend, MockBaseBackend
from editroute.retrieval import accept_all

DATA = Path(__file__).parent / "data"

# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def embedder():
    return NgramEmbedder(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def js_edit():
    return Edit("js", "What year was JS 7.62 made?", "1963", 1)


@pytest.fixture
def system(embedder):
    return EditingSystem(embedder, accept_all(), MockBaseBackend(), MockAlignedBackend())


@pytest.fixture
def verdict():
    """Record one acceptance line; the caller still asserts."""

    def record(number, title, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES.append(f"[{status}] AC{number} {title}" + (f": {detail}" if detail else ""))
        return ok

    return record

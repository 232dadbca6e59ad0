from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from persistent_rma.matrix_market import SparseMatrix

DATA = Path(__file__).parent / "data"

_acceptance: list[tuple[str, str]] = []


def random_matrix(n: int, nnz: int, seed: int) -> SparseMatrix:
    """Seeded generator behind the bundled random*.mtx fixtures."""
    rng = np.random.default_rng(seed)
    return SparseMatrix.from_coords(n, n, rng.integers(0, n, size=(nnz, 2)), "random")


@pytest.fixture
def data_dir() -> Path:
    return DATA


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    if "test_acceptance.py" not in report.nodeid:
        return
    label = report.nodeid.split("::")[-1]
    _acceptance.append((label, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _acceptance:
        terminalreporter.write_line(f"{outcome}  {label}")

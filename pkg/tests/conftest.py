from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest


def central_difference(f, theta, h=1e-5):
    theta = np.asarray(theta, dtype=np.float64)
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def write_csv(path: Path, X, y, header=None):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row, lab in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance report: one line per criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])

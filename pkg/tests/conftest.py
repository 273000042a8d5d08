import numpy as np
import pytest

from echomesh.geometry import LabeledCloud


@pytest.fixture
def rng():
    return np.random.default_rng(20241018)


@pytest.fixture
def cloud(rng):
    pts = rng.normal(scale=20.0, size=(200, 3))
    return LabeledCloud(pts, rng.integers(0, 24, size=200))


def ball_points(rng, n, radius, center=(0.0, 0.0, 0.0)):
    """Uniform points inside a ball, by rejection from the bounding cube."""
    out = []
    while sum(len(o) for o in out) < n:
        x = rng.uniform(-1, 1, size=(2 * n + 16, 3))
        out.append(x[np.sum(x ** 2, axis=1) <= 1.0])
    return np.vstack(out)[:n] * radius + np.asarray(center)


# One line per acceptance criterion, echoed at the end of the pytest run.
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

import numpy as np
import pytest

from dastraffic.features import FeatureSequence

# (number, title, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} | {detail}")


def toy_segments(n=10, T=8, D=6, seed=0, noise=0.3):
    """Segments whose label is readable from the first three feature columns."""
    rng = np.random.default_rng(seed)
    segs = []
    for i in range(n):
        y = rng.integers(0, 3, T).astype(np.uint8)
        x = rng.standard_normal((T, D)) * noise
        x[np.arange(T), y] += 2.0
        segs.append(FeatureSequence(f"toy{i:03d}", 1, x, y, [f"c{j}" for j in range(D)], (0, 1, 2)))
    return segs


@pytest.fixture
def toy():
    return toy_segments()

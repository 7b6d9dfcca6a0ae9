import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dastraffic.errors import ConfigError
from dastraffic.metrics import confusion, macro_f1, metrics, per_class_f1, ri_acc, rpi


def test_confusion_examples():
    y = np.array([0, 1, 2, 2, 1, 0])
    np.testing.assert_array_equal(confusion(y, y), np.diag([2, 2, 2]))
    cm = confusion(np.zeros(9, int), np.repeat([0, 1, 2], 3))
    assert cm[:, 0].tolist() == [3, 3, 3] and cm[:, 1:].sum() == 0
    with pytest.raises(ConfigError):
        confusion([np.zeros(3)], [np.zeros(4)])


def test_confusion_matches_tally():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 3, 1000), rng.integers(0, 3, 1000)
    tally = np.zeros((3, 3), int)
    for a, b in zip(t, p):
        tally[a][b] += 1
    np.testing.assert_array_equal(confusion([p[:400], p[400:]], [t[:400], t[400:]]), tally)
    correct = sum(int(a == b) for a, b in zip(p, t))
    assert metrics(tally)[0] == 100.0 * correct / 1000


def test_metrics_examples():
    assert metrics(np.diag([10, 10, 10])) == (100.0, 100.0)
    acc, f1 = metrics(np.array([[5, 5, 0], [0, 10, 0], [0, 0, 10]]))
    assert acc == pytest.approx(250 / 3)
    assert per_class_f1(np.array([[5, 5, 0], [0, 10, 0], [0, 0, 10]]))[0] * 100 == pytest.approx(200 / 3)
    assert metrics(np.array([[7, 0, 0], [0, 0, 0], [0, 0, 0]])) == (100.0, 100.0)
    assert macro_f1(np.array([[7, 0, 0], [0, 0, 0], [0, 0, 0]])) == 100.0
    with pytest.raises(ConfigError):
        metrics(np.zeros((3, 3)))


def test_weighted_f1_oracle():
    cm = np.array([[50, 3, 2], [4, 20, 6], [1, 2, 12]])
    f1 = []
    for c in range(3):
        p = cm[c, c] / cm[:, c].sum()
        r = cm[c, c] / cm[c, :].sum()
        f1.append(2 * p * r / (p + r))
    weighted = 100 * np.dot(f1, cm.sum(axis=1)) / cm.sum()
    assert metrics(cm)[1] == pytest.approx(weighted, rel=1e-12)
    assert macro_f1(cm) == pytest.approx(100 * np.mean(f1), rel=1e-12)


def test_relative_measures():
    assert ri_acc(90.0, 90.0) == 0.0 and rpi(5, 5) == 0.0
    assert ri_acc(88.47, 88.08) == pytest.approx(100 * 0.39 / 88.08)
    with pytest.raises(ConfigError):
        ri_acc(1.0, 0.0)
    with pytest.raises(ConfigError):
        rpi(1, 0)


@settings(max_examples=100)
@given(st.floats(1, 100), st.floats(1, 100))
def test_relative_measures_antisymmetric(a, b):
    assert np.sign(ri_acc(a, b)) == -np.sign(ri_acc(b, a))
    assert ri_acc(a, b) * b == pytest.approx(-ri_acc(b, a) * a, abs=1e-9)
    assert rpi(a, b) * b == pytest.approx(-rpi(b, a) * a, abs=1e-9)

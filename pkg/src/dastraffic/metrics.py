"""Frame-level classification metrics."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

NUM_CLASSES = 3


def confusion(preds, truths, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts[true, predicted] over every frame of every sequence."""
    if isinstance(preds, np.ndarray) and preds.ndim == 1:
        preds, truths = [preds], [truths]
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ConfigError("prediction and truth lists differ in length")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(preds, truths):
        p = np.asarray(p, dtype=np.int64).ravel()
        t = np.asarray(t, dtype=np.int64).ravel()
        if p.shape != t.shape:
            raise ConfigError(f"sequence length mismatch: {p.size} predictions vs {t.size} labels")
        np.add.at(cm, (t, p), 1)
    return cm


def per_class_f1(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=float)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics(cm) -> tuple[float, float]:
    """(accuracy %, support-weighted F1 %)."""
    cm = np.asarray(cm)
    total = cm.sum()
    if total <= 0:
        raise ConfigError("empty confusion matrix")
    acc = 100.0 * np.trace(cm) / total
    support = cm.sum(axis=1)
    f1 = 100.0 * float(np.sum(per_class_f1(cm) * support) / total)
    return float(acc), f1


def macro_f1(cm) -> float:
    cm = np.asarray(cm)
    present = cm.sum(axis=1) > 0
    if not present.any():
        raise ConfigError("empty confusion matrix")
    return 100.0 * float(per_class_f1(cm)[present].mean())


def ri_acc(acc_model: float, acc_base: float) -> float:
    """Relative accuracy improvement over the baseline, in percent."""
    if acc_base <= 0:
        raise ConfigError("baseline accuracy must be positive")
    return 100.0 * (acc_model - acc_base) / acc_base


def rpi(params_model: float, params_base: float) -> float:
    """Relative parameter increase over the baseline, in percent."""
    if params_base <= 0:
        raise ConfigError("baseline parameter count must be positive")
    return 100.0 * (params_model - params_base) / params_base

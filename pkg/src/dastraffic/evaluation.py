"""Experiment protocols: ablation table, cross-site transfer, attention export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .errors import ConfigError
from .features import base_columns
from .layers import Model
from .metrics import confusion, metrics, ri_acc, rpi
from .sim import CLASSES
from .train import SearchSpace, TrainConfig, hyper_search, predict_segments, substream

BASELINE = "bi"
FEATURE_SETS = ("X", "X+Δ")
REPORT_COLUMNS = ("Model", "Acc(%)", "F1(%)", "#Param(M)", "RI-Acc(%)", "RPI(%)",
                  "Acc_std", "F1_std", "Macro-F1(%)")


@dataclass
class MetricsRow:
    model: str
    features: str
    acc: float
    f1: float
    std_acc: float
    std_f1: float
    params: int
    macro_f1: float = float("nan")
    ri_acc: float | None = None
    rpi: float | None = None
    config: dict | None = None
    seed: int | None = None

    @property
    def label(self) -> str:
        return self.model if self.features == "X" else f"{self.model}+Δ"

    @property
    def params_m(self) -> str:
        return f"{self.params / 1e6:.2f}"

    def cells(self) -> list[str]:
        def pct(v):
            return "" if v is None else f"{v:.2f}"
        return [self.label, f"{self.acc:.2f}", f"{self.f1:.2f}", self.params_m, pct(self.ri_acc),
                pct(self.rpi), f"{self.std_acc:.2f}", f"{self.std_f1:.2f}", f"{self.macro_f1:.2f}"]


def feature_set(segs, name: str):
    """Restrict segments to base features ("X") or keep everything ("X+Δ")."""
    if name == "X+Δ":
        return list(segs)
    if name != "X":
        raise ConfigError(f"unknown feature set {name!r}")
    cols = base_columns(segs[0].layout) if segs[0].layout else list(range(segs[0].D))
    return [s.select(cols) for s in segs]


def available_feature_sets(segs) -> tuple:
    layout = segs[0].layout
    has_deltas = any(n.split("/")[-1].startswith("d1_") for n in layout)
    return FEATURE_SETS if has_deltas else ("X",)


def attach_baseline(rows):
    """Fill RI-Acc and RPI of every row against the baseline row of its feature set."""
    base = {r.features: r for r in rows if r.model == BASELINE}
    for r in rows:
        if r.features not in base:
            raise ConfigError(f"baseline {BASELINE!r} missing for feature set {r.features}")
        b = base[r.features]
        r.ri_acc = ri_acc(r.acc, b.acc)
        r.rpi = rpi(r.params, b.params)
    return rows


def run_ablation(segs, archs, trials: int = 50, seed: int = 0, folds: int = 5,
                 feature_sets=None, space: SearchSpace = SearchSpace(), base: TrainConfig | None = None,
                 ledger_dir=None) -> list[MetricsRow]:
    """Search, cross-validate and tabulate every architecture on every feature set.

    Each (architecture, feature set) cell draws its seed from its own named
    substream, so rows do not depend on evaluation order.
    """
    archs = list(archs)
    if BASELINE not in archs:
        raise ConfigError(f"arch list must include the baseline {BASELINE!r}")
    feature_sets = tuple(feature_sets or available_feature_sets(segs))
    rows = []
    for fs_name in feature_sets:
        data = feature_set(segs, fs_name)
        for arch in archs:
            cell_seed = int(substream(seed, f"ablation/{fs_name}/{arch}").integers(2**31))
            ledger = None
            if ledger_dir is not None:
                tag = "X" if fs_name == "X" else "XD"
                ledger = Path(ledger_dir) / f"trials_{arch}_{tag}.csv"
            best, _ = hyper_search(arch, data, space, trials, cell_seed, folds, base, ledger)
            rows.append(MetricsRow(arch, fs_name, best.mean_acc, best.mean_f1, best.std_acc, best.std_f1,
                                   best.params, best.mean_macro_f1, config=best.config, seed=cell_seed))
    return attach_baseline(rows)


def write_report(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(r.cells())
    return path


def write_summary(path, rows, extra=None) -> Path:
    data = {"rows": [asdict(r) | {"label": r.label} for r in rows]}
    if extra:
        data.update(extra)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))
    return Path(path)


# --------------------------------------------------------------------------
# Transfer
# --------------------------------------------------------------------------

def parse_groups(text: str) -> dict:
    """'A:1-3,B:3-5' -> {'A': (0, 1, 2), 'B': (2, 3, 4)} (1-based SP numbers in, 0-based out)."""
    groups = {}
    for part in text.split(","):
        try:
            name, rng_ = part.split(":")
            lo, hi = (int(v) for v in rng_.split("-"))
        except ValueError:
            raise ConfigError(f"bad group spec {part!r}; expected NAME:FIRST-LAST") from None
        groups[name.strip()] = tuple(range(lo - 1, hi))
    return groups


def check_triple(triple, num_sps=None):
    t = tuple(int(v) for v in triple)
    if len(t) != 3 or t[1] != t[0] + 1 or t[2] != t[1] + 1:
        raise ConfigError(f"SP group {triple} is not three contiguous SPs")
    if t[0] < 0 or (num_sps is not None and t[2] >= num_sps):
        raise ConfigError(f"SP group {triple} outside the site layout")
    return t


def evaluate_segments(model: Model, segs):
    if not segs:
        raise ConfigError("no segments to evaluate")
    if segs[0].D != model.spec.input_dim:
        raise ConfigError(f"feature width {segs[0].D} does not match model input {model.spec.input_dim}")
    preds = predict_segments(model, segs)
    cm = confusion(preds, [s.labels for s in segs])
    return cm, metrics(cm)[0]


def transfer_eval(model: Model, target_segs, groups: dict, source_segs=None, num_sps=None) -> dict:
    """Per-group confusion matrix and accuracy on a different site.

    ``target_segs`` are featurized with spatial triples; each group selects
    the segments whose SP triple equals the group.  With ``source_segs`` the
    in-site result is added under the key ``"source"``.
    """
    out = {}
    for name, triple in groups.items():
        t = check_triple(triple, num_sps)
        chosen = [s for s in target_segs if tuple(s.sps) == t]
        if not chosen:
            raise ConfigError(f"no target segments for group {name} {t}")
        out[name] = evaluate_segments(model, chosen)
    if source_segs is not None:
        out["source"] = evaluate_segments(model, source_segs)
    return out


def write_confusion_csv(path, cm) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *CLASSES])
        for name, row in zip(CLASSES, np.asarray(cm)):
            w.writerow([name, *(int(v) for v in row)])
    return path


# --------------------------------------------------------------------------
# Attention export
# --------------------------------------------------------------------------

def attention_maps(model: Model, seq):
    """Attention weights per stage, class probabilities and predictions for one segment."""
    with E.no_grad():
        logits, attn = model.forward(seq.features)
    probs = np.exp(E.log_softmax(logits.data))
    return {k: A.data for k, A in attn.items()}, probs, np.argmax(probs, axis=-1)


def _write_matrix(path, mat, header):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in mat:
            w.writerow([f"{v:.17g}" for v in row])


def export_attention(model: Model, seq, out_dir, png: bool = False) -> list[Path]:
    """Write TA (T x T) and SA (T x 9) weight CSVs plus a probability/label CSV."""
    if not model.has_attention:
        raise ConfigError("nothing to export")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps, probs, pred = attention_maps(model, seq)
    written = []
    for stage, A in maps.items():
        kind = stage.split(".")[-1]
        path = out_dir / f"{seq.segment_id}_{stage.replace('.', '_')}.csv"
        if kind == "TA":
            _write_matrix(path, A, [f"k{j}" for j in range(A.shape[1])])
        else:
            flat = A.reshape(A.shape[0], 9)
            _write_matrix(path, flat, [f"q{i}k{j}" for i in range(3) for j in range(3)])
        written.append(path)
    lab_path = out_dir / f"{seq.segment_id}_labels.csv"
    with lab_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p_noise", "p_car", "p_bus", "predicted", "true"])
        for p, yhat, y in zip(probs, pred, seq.labels):
            w.writerow([f"{p[0]:.17g}", f"{p[1]:.17g}", f"{p[2]:.17g}", CLASSES[yhat], CLASSES[y]])
    written.append(lab_path)
    if png:
        written.append(_render_png(out_dir / f"{seq.segment_id}_attention.png", maps, probs, pred, seq.labels))
    return written


def _render_png(path, maps, probs, pred, truth):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(maps)
    fig, axes = plt.subplots(2, n, figsize=(5 * n, 6), squeeze=False,
                             gridspec_kw={"height_ratios": [4, 1]})
    for col, (stage, A) in enumerate(maps.items()):
        ax = axes[0, col]
        img = A if A.ndim == 2 else A.mean(axis=1)
        ax.imshow(img.T if A.ndim == 3 else img, aspect="auto", cmap="viridis")
        ax.set_title(stage)
        strip = axes[1, col]
        strip.plot(probs)
        strip.plot(pred, "k.", ms=2)
        strip.plot(truth, "r_", ms=3)
        strip.set_yticks(range(len(CLASSES)), CLASSES)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def mean_sa_mass(model: Model, segs, cls: int):
    """Average attention received by each SP key over frames labelled ``cls``.

    Uses the first SA stage; returns a length-3 vector.
    """
    total = np.zeros(3)
    count = 0
    for seq in segs:
        maps, _, _ = attention_maps(model, seq)
        sa = [A for k, A in maps.items() if k.endswith("SA")]
        if not sa:
            raise ConfigError("model has no spatial attention stage")
        sel = seq.labels == cls
        if sel.any():
            total += sa[0][sel].mean(axis=1).sum(axis=0)
            count += int(sel.sum())
    return total / max(count, 1)

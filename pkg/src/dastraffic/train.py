"""Training loop, Adam, k-fold plans and seeded random hyperparameter search."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import engine as E
from .errors import ConfigError
from .layers import Model, ModelSpec, compose, expected_param_count
from .metrics import confusion, macro_f1, metrics

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class TrainConfig:
    lr: float = 5e-5
    layers: int = 1
    hidden: int = 128
    dropout: float = 0.1
    l2: float = 1e-5
    epochs_max: int = 200
    patience: int = 10
    batch_segments: int = 16
    seed: int = 0
    d_k: int | None = None

    def __post_init__(self):
        if self.lr < 0 or self.l2 < 0:
            raise ConfigError("lr and l2 must be non-negative")
        if self.patience < 1 or self.epochs_max < 1 or self.batch_segments < 1:
            raise ConfigError("patience, epochs_max and batch_segments must be >= 1")

    def model_spec(self, arch: str, input_dim: int) -> ModelSpec:
        return ModelSpec(arch, input_dim, hidden=self.hidden, layers=self.layers,
                         dropout=self.dropout, d_k=self.d_k)

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Loss and optimizer
# --------------------------------------------------------------------------

def cross_entropy(logits, labels) -> E.Tensor:
    """Mean per-frame negative log-likelihood."""
    return E.softmax_cross_entropy(logits, labels)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, l2: float = 0.0) -> AdamState:
    """In-place Adam update with the L2 term folded into the gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if l2:
            g = g + l2 * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1 - BETA1) * g
        v *= BETA2
        v += (1 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _batches(segs, size, order=None):
    order = range(len(segs)) if order is None else order
    groups = {}
    for i in order:
        groups.setdefault(segs[i].T, []).append(i)
    out = []
    for idx in groups.values():
        for k in range(0, len(idx), size):
            chunk = idx[k:k + size]
            out.append((np.stack([segs[i].features for i in chunk]),
                        np.stack([segs[i].labels for i in chunk])))
    return out


def fit_normalizer(model: Model, segs):
    x = np.concatenate([s.features for s in segs], axis=0)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    model.input_mean = mean
    model.input_scale = np.where(std > 1e-8, std, 1.0)


def evaluate(model: Model, segs, batch: int = 32):
    """(mean loss, confusion matrix) over ``segs`` without recording a graph."""
    total, frames = 0.0, 0
    preds, truths = [], []
    with E.no_grad():
        for x, y in _batches(segs, batch):
            logits, _ = model.forward(x)
            total += float(cross_entropy(logits, y).data) * y.size
            frames += y.size
            preds.append(np.argmax(logits.data, axis=-1))
            truths.append(y)
    return total / frames, confusion([p.ravel() for p in preds], [t.ravel() for t in truths])


def predict_segments(model: Model, segs, batch: int = 32):
    out = []
    with E.no_grad():
        for s in segs:
            logits, _ = model.forward(s.features)
            out.append(np.argmax(logits.data, axis=-1))
    return out


def train_model(spec: ModelSpec, train_segs, val_segs, config: TrainConfig, verbose: bool = False):
    """Train with early stopping on validation loss.

    Returns the model restored to its best-validation-loss snapshot and the
    per-epoch history (list of dicts).
    """
    if not train_segs or not val_segs:
        raise ConfigError("training and validation splits must be non-empty")
    overlap = {s.segment_id for s in train_segs} & {s.segment_id for s in val_segs}
    if overlap:
        raise ConfigError(f"train and validation share segments: {sorted(overlap)[:3]}")
    model = compose(spec, seed=config.seed, rng=substream(config.seed, "init"))
    fit_normalizer(model, train_segs)
    params = model.parameters()
    state = AdamState()
    shuffle_rng = substream(config.seed, "shuffle")
    drop_rng = substream(config.seed, "dropout")

    best = (np.inf, 0, model.state())
    history = []
    stale = 0
    for epoch in range(1, config.epochs_max + 1):
        order = shuffle_rng.permutation(len(train_segs))
        losses = []
        for x, y in _batches(train_segs, config.batch_segments, order):
            for p in params.values():
                p.zero_grad()
            logits, _ = model.forward(x, training=True, rng=drop_rng)
            loss = cross_entropy(logits, y)
            E.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, state, config.lr, config.l2)
            losses.append(float(loss.data))
        val_loss, cm = evaluate(model, val_segs)
        val_acc = metrics(cm)[0] / 100.0
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_loss": val_loss, "val_acc": val_acc})
        if verbose:
            log.info("epoch %d train %.4f val %.4f acc %.4f", epoch, history[-1]["train_loss"], val_loss, val_acc)
        if val_loss < best[0]:
            best = (val_loss, epoch, model.state())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best[2])
    model.best_epoch = best[1]
    return model, history


# --------------------------------------------------------------------------
# Cross-validation and search
# --------------------------------------------------------------------------

@dataclass
class FoldPlan:
    folds: list
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int):
        val = list(self.folds[i])
        train = [s for j, f in enumerate(self.folds) if j != i for s in f]
        return train, val


def kfold(segment_ids, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle then contiguous partition; earlier folds absorb the remainder."""
    ids = list(segment_ids)
    if len(ids) < k:
        raise ConfigError(f"need at least {k} segments for {k}-fold CV, got {len(ids)}")
    perm = substream(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(shuffled[start:start + size])
        start += size
    return FoldPlan(folds, seed)


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple = (1e-5, 1e-4)
    layers: tuple = (1, 3)
    hidden: tuple = (64, 256)
    dropout: tuple = (0.1, 0.3)
    l2: tuple = (1e-6, 1e-3)

    def sample(self, rng: np.random.Generator) -> dict:
        return {
            "lr": float(np.exp(rng.uniform(np.log(self.lr[0]), np.log(self.lr[1])))),
            "layers": int(rng.integers(self.layers[0], self.layers[1] + 1)),
            "hidden": int(rng.integers(self.hidden[0], self.hidden[1] + 1)),
            "dropout": float(rng.uniform(*self.dropout)),
            "l2": float(np.exp(rng.uniform(np.log(self.l2[0]), np.log(self.l2[1])))),
        }

    def contains(self, cfg: dict) -> bool:
        return (self.lr[0] <= cfg["lr"] <= self.lr[1]
                and self.layers[0] <= cfg["layers"] <= self.layers[1]
                and self.hidden[0] <= cfg["hidden"] <= self.hidden[1]
                and self.dropout[0] <= cfg["dropout"] <= self.dropout[1]
                and self.l2[0] <= cfg["l2"] <= self.l2[1])


@dataclass
class TrialRecord:
    trial: int
    config: dict
    fold_acc: list
    fold_f1: list
    params: int
    fold_macro_f1: list = field(default_factory=list)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.fold_acc))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.fold_acc))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.fold_f1))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean(self.fold_macro_f1)) if self.fold_macro_f1 else float("nan")


def best_trial(records) -> TrialRecord:
    """Highest mean accuracy; ties go to fewer parameters, then the earlier trial."""
    if not records:
        raise ConfigError("no trial records")
    return min(records, key=lambda r: (-r.mean_acc, r.params, r.trial))


def cross_validate(arch: str, segs, config: TrainConfig, k: int = 5):
    """Per-fold (acc %, weighted F1 %, macro F1 %) for one configuration."""
    by_id = {s.segment_id: s for s in segs}
    plan = kfold(sorted(by_id), k, config.seed)
    accs, f1s, macros = [], [], []
    for i in range(plan.k):
        tr, va = plan.split(i)
        cfg = replace(config, seed=config.seed * 1000 + i)
        spec = cfg.model_spec(arch, segs[0].D)
        model, _ = train_model(spec, [by_id[s] for s in tr], [by_id[s] for s in va], cfg)
        _, cm = evaluate(model, [by_id[s] for s in va])
        acc, f1 = metrics(cm)
        accs.append(acc)
        f1s.append(f1)
        macros.append(macro_f1(cm))
    return accs, f1s, macros


def hyper_search(arch: str, segs, space: SearchSpace = SearchSpace(), trials: int = 50, seed: int = 0,
                 folds: int = 5, base: TrainConfig | None = None, ledger_path=None):
    """Seeded random search scored by mean k-fold validation accuracy.

    Returns ``(best_record, all_records)``; with ``ledger_path`` every trial
    is also written to a CSV ledger.
    """
    base = base or TrainConfig()
    rng = substream(seed, f"search/{arch}")
    records = []
    for t in range(trials):
        sampled = space.sample(rng)
        cfg = replace(base, seed=int(rng.integers(2**31)), **sampled)
        accs, f1s, macros = cross_validate(arch, segs, cfg, folds)
        params = expected_param_count(cfg.model_spec(arch, segs[0].D))
        records.append(TrialRecord(t, sampled, accs, f1s, params, macros))
        log.info("%s trial %d: acc %.2f", arch, t, records[-1].mean_acc)
    if ledger_path is not None:
        write_trial_ledger(ledger_path, records)
    return best_trial(records), records


LEDGER_COLUMNS = ("trial", "lr", "layers", "hidden", "dropout", "l2", "mean_acc", "std_acc", "mean_f1", "params")


def write_trial_ledger(path, records) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_COLUMNS)
        for r in records:
            c = r.config
            w.writerow([r.trial, repr(c["lr"]), c["layers"], c["hidden"], repr(c["dropout"]), repr(c["l2"]),
                        f"{r.mean_acc:.6f}", f"{r.std_acc:.6f}", f"{r.mean_f1:.6f}", r.params])
    return path

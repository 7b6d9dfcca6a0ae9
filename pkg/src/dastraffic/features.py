"""Window features, label alignment, derivative/spatial augmentation, segment packing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, FormatError
from .sim import BUS, CAR, CLASSES, NOISE

EPS = 1e-12
HIST_BINS = 20
BANDS = ((0.1, 5.0), (5.0, 10.0), (10.0, 15.0), (15.0, 20.0), (20.0, 25.0), (25.0, 30.0))

TIME_FEATURES = (
    "mean", "std", "rms", "ptp", "skewness", "kurtosis", "zcr", "log_energy",
    "amp_entropy", "hjorth_activity", "hjorth_mobility", "hjorth_complexity",
    "p5", "p25", "p50", "p75", "p95", "iqr",
)
FREQ_FEATURES = (
    "spec_centroid", "spec_bandwidth", "spec_rolloff85", "spec_flatness", "spec_entropy",
    "dom_freq", "dom_mag",
    "band_0_5", "band_5_10", "band_10_15", "band_15_20", "band_20_25", "band_25_30",
    "log_spec_energy", "spec_skewness", "spec_kurtosis", "spec_crest", "bw90",
)
BASE_FEATURES = TIME_FEATURES + FREQ_FEATURES
N_BASE = len(BASE_FEATURES)
SLOTS = ("left", "target", "right")

FSEQ_MAGIC = b"FSEQ1\n"


def _safe_div(num, den):
    den = np.asarray(den, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    ok = den > 0
    np.divide(num, den, out=out, where=ok)
    return out


def _time_features(x):
    n = x.shape[1]
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = np.mean(xc ** 2, axis=1)
    std = np.sqrt(var)
    rms = np.sqrt(np.mean(x ** 2, axis=1))
    ptp = x.max(axis=1) - x.min(axis=1)
    m3 = np.mean(xc ** 3, axis=1)
    m4 = np.mean(xc ** 4, axis=1)
    degenerate = var <= EPS * np.maximum(np.mean(x ** 2, axis=1), EPS)
    skew = np.where(degenerate, 0.0, _safe_div(m3, var ** 1.5))
    kurt = np.where(degenerate, 0.0, _safe_div(m4, var ** 2) - 3.0)
    zcr = np.sum(x[:, :-1] * x[:, 1:] < 0, axis=1) / (n - 1)
    log_energy = np.log(np.sum(x ** 2, axis=1) + EPS)

    lo = x.min(axis=1, keepdims=True)
    span = ptp[:, None]
    rel = _safe_div(x - lo, span)
    idx = np.minimum((rel * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    idx += np.arange(x.shape[0])[:, None] * HIST_BINS
    counts = np.bincount(idx.ravel(), minlength=x.shape[0] * HIST_BINS).reshape(-1, HIST_BINS)
    p = counts / n
    with np.errstate(divide="ignore", invalid="ignore"):
        amp_entropy = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)

    dx = np.diff(x, axis=1)
    ddx = np.diff(dx, axis=1)
    var_d = np.var(dx, axis=1)
    var_dd = np.var(ddx, axis=1)
    mobility = np.sqrt(_safe_div(var_d, var))
    mobility_d = np.sqrt(_safe_div(var_dd, var_d))
    complexity = _safe_div(mobility_d, mobility)

    pct = np.percentile(x, [5, 25, 50, 75, 95], axis=1)
    iqr = pct[3] - pct[1]
    return [mean, std, rms, ptp, skew, kurt, zcr, log_energy, amp_entropy,
            var, mobility, complexity, *pct, iqr]


def _freq_features(x, fs):
    n = x.shape[1]
    mag = np.abs(np.fft.rfft(x, axis=1))
    power = mag ** 2
    f = np.fft.rfftfreq(n, 1.0 / fs)
    m_tot = mag.sum(axis=1)
    p_tot = power.sum(axis=1)
    live = p_tot > 0

    w = _safe_div(mag, m_tot[:, None])
    centroid = np.sum(w * f, axis=1)
    dev = f[None, :] - centroid[:, None]
    bandwidth = np.sqrt(np.sum(w * dev ** 2, axis=1))
    spec_skew = _safe_div(np.sum(w * dev ** 3, axis=1), bandwidth ** 3)
    spec_kurt = _safe_div(np.sum(w * dev ** 4, axis=1), bandwidth ** 4)

    cum = np.cumsum(power, axis=1)
    cum = _safe_div(cum, p_tot[:, None])

    def crossing(q):
        k = np.argmax(cum >= q - 1e-12, axis=1)
        return f[k]

    rolloff = crossing(0.85)
    bw90 = crossing(0.95) - crossing(0.05)

    floor = EPS * power.max(axis=1, keepdims=True)
    flatness = _safe_div(np.exp(np.mean(np.log(power + floor + (~live[:, None])), axis=1)),
                         np.mean(power, axis=1))
    pn = _safe_div(power, p_tot[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.sum(np.where(pn > 0, pn * np.log(pn), 0.0), axis=1) / np.log(f.size)

    k_dom = np.argmax(mag, axis=1)
    dom_freq = f[k_dom]
    dom_mag = mag.max(axis=1) / n
    bands = []
    for i, (lo, hi) in enumerate(BANDS):
        sel = (f >= lo) & ((f <= hi) if i == len(BANDS) - 1 else (f < hi))
        bands.append(_safe_div(power[:, sel].sum(axis=1), p_tot))
    log_energy = np.log(p_tot + EPS)
    crest = _safe_div(mag.max(axis=1), mag.mean(axis=1))
    cols = [centroid, bandwidth, rolloff, flatness, entropy, dom_freq, dom_mag, *bands,
            log_energy, spec_skew, spec_kurt, crest, bw90]
    return [np.where(live, c, 0.0) for c in cols]


def featurize_frames(frames, fs: float) -> np.ndarray:
    """Base features for a stack of weighted windows, shape (count, 36)."""
    x = np.atleast_2d(np.asarray(frames, dtype=float))
    if x.shape[1] < 4:
        raise ConfigError("window must have at least 4 samples")
    if not np.all(np.isfinite(x)):
        raise ConfigError("invalid window")
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        cols = _time_features(x) + _freq_features(x, fs)
    out = np.stack(cols, axis=1)
    return out


def featurize_window(frame, fs: float) -> np.ndarray:
    samples = frame.samples if isinstance(frame, dsp.WindowFrame) else frame
    return featurize_frames(np.asarray(samples)[None, :], fs)[0]


# --------------------------------------------------------------------------
# Temporal and spatial augmentation
# --------------------------------------------------------------------------

def _central_diff(f):
    padded = np.concatenate([f[:1], f, f[-1:]], axis=0)
    return (padded[2:] - padded[:-2]) / 2.0


def append_deltas(seq) -> np.ndarray:
    """[f | Δf | ΔΔf] with a central difference and replicated edges."""
    f = np.asarray(seq, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 1:
        raise ConfigError("need at least one frame")
    d1 = _central_diff(f)
    d2 = _central_diff(d1)
    return np.concatenate([f, d1, d2], axis=1)


def delta_layout(names):
    names = list(names)
    return names + [f"d1_{n}" for n in names] + [f"d2_{n}" for n in names]


def spatial_concat(per_sp: dict, target, neighbors, replicate: bool = True) -> np.ndarray:
    """Frame-wise [left | target | right] concatenation."""
    left, right = neighbors
    if target not in per_sp:
        raise ConfigError(f"target SP {target} has no features")
    center = np.asarray(per_sp[target])
    blocks = []
    for sp in (left, target, right):
        if sp in per_sp and sp is not None:
            block = np.asarray(per_sp[sp])
        elif replicate:
            block = center
        else:
            raise ConfigError(f"neighbor SP {sp} missing and replication disabled")
        if block.shape != center.shape:
            raise ConfigError("all SP feature matrices must share T and D")
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


def spatial_layout(names):
    return [f"{slot}/{n}" for slot in SLOTS for n in names]


def base_columns(layout) -> list[int]:
    """Indices of the columns that are not derivative features."""
    return [i for i, name in enumerate(layout) if not name.split("/")[-1].startswith(("d1_", "d2_"))]


# --------------------------------------------------------------------------
# Labels
# --------------------------------------------------------------------------

def sample_labels(annotations, n_samples: int, fs: float) -> np.ndarray:
    """Class of every sample; Bus wins where annotations overlap."""
    t = np.arange(n_samples) / fs
    labels = np.zeros(n_samples, dtype=np.uint8)
    for cls in (CAR, BUS):
        for ev in annotations:
            if ev.cls != cls:
                continue
            i0 = np.searchsorted(t, ev.start_s, "left")
            i1 = np.searchsorted(t, ev.end_s, "left")
            labels[i0:i1] = cls
    return labels


def align_labels(annotations, grid: dsp.WindowGrid, total_s: float) -> np.ndarray:
    """Majority class per window frame; ties go to Bus, then Car, then Noise."""
    n = int(round(total_s * grid.fs))
    per_sample = sample_labels(annotations, n, grid.fs)
    offsets = grid.offsets(n)
    counts = []
    for cls in (NOISE, CAR, BUS):
        c = np.concatenate([[0], np.cumsum(per_sample == cls)])
        counts.append(c[offsets + grid.n_win] - c[offsets])
    score = np.stack(counts, axis=1) * 3 + np.array([NOISE, CAR, BUS])
    return np.argmax(score, axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# Segments
# --------------------------------------------------------------------------

@dataclass
class FeatureSequence:
    segment_id: str
    sp: int
    features: np.ndarray
    labels: np.ndarray
    layout: list = field(default_factory=list)
    sps: tuple = ()
    start_frame: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features must be T x D with one label per frame")
        if self.layout and len(self.layout) != self.features.shape[1]:
            raise ConfigError("layout length must equal feature width")
        if not self.sps:
            self.sps = (self.sp, self.sp, self.sp)
        self.sps = tuple(int(s) for s in self.sps)

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def header(self) -> dict:
        return {"format": "FSEQ1", "segment_id": self.segment_id, "sp": self.sp, "sps": list(self.sps),
                "start_frame": self.start_frame, "T": self.T, "D": self.D,
                "layout": list(self.layout), "classes": list(CLASSES)}

    def select(self, columns) -> "FeatureSequence":
        layout = [self.layout[i] for i in columns] if self.layout else []
        return FeatureSequence(self.segment_id, self.sp, self.features[:, columns], self.labels,
                               layout, self.sps, self.start_frame)


def frames_per_segment(grid: dsp.WindowGrid, segment_s: float = 90.0) -> int:
    return grid.count(int(round(segment_s * grid.fs)))


def pack_segments(features, labels, segment_s: float = 90.0, grid: dsp.WindowGrid | None = None,
                  layout=(), sp: int = 0, sps=(), prefix: str = "seg") -> list[FeatureSequence]:
    """Cut a frame sequence into consecutive non-overlapping segments; drop the remainder."""
    grid = grid or dsp.WindowGrid()
    per = frames_per_segment(grid, segment_s)
    features = np.asarray(features)
    labels = np.asarray(labels)
    if per < 1 or features.shape[0] < per:
        raise ConfigError(f"need at least {per} frames for one segment, got {features.shape[0]}")
    out = []
    for i in range(features.shape[0] // per):
        sl = slice(i * per, (i + 1) * per)
        out.append(FeatureSequence(f"{prefix}{i:04d}", sp, features[sl], labels[sl],
                                   list(layout), tuple(sps), i * per))
    return out


def sp_features(data, fs: float, grid: dsp.WindowGrid, deltas: bool = True) -> np.ndarray:
    """Per-SP frame features: (num_sps, frames, 36 or 108)."""
    out = []
    for row in np.atleast_2d(data):
        f = featurize_frames(dsp.frame_matrix(row, grid), fs)
        out.append(append_deltas(f) if deltas else f)
    return np.stack(out)


def featurize_scene(data, annotations, grid: dsp.WindowGrid, deltas: bool = True, spatial: bool = True,
                    targets=None, segment_s: float = 90.0, prefix: str = "") -> list[FeatureSequence]:
    """Preprocessed strain matrix + annotations -> packed feature sequences.

    With ``spatial`` each target SP is joined with its two neighbours.  By
    default only SPs that have both neighbours are targets; edge targets
    requested explicitly use replication.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    num_sps, n = data.shape
    per_sp = sp_features(data, grid.fs, grid, deltas)
    labels = align_labels(annotations, grid, n / grid.fs)
    names = delta_layout(BASE_FEATURES) if deltas else list(BASE_FEATURES)
    if targets is None:
        targets = list(range(1, num_sps - 1)) if spatial and num_sps >= 3 else list(range(num_sps))
    seqs = []
    for tgt in targets:
        if not 0 <= tgt < num_sps:
            raise ConfigError(f"target SP {tgt} outside 0..{num_sps - 1}")
        if spatial:
            triple = (tgt - 1, tgt, tgt + 1)
            feats = spatial_concat(dict(enumerate(per_sp)), tgt, (triple[0], triple[2]))
            layout = spatial_layout(names)
            sps = tuple(s if 0 <= s < num_sps else tgt for s in triple)
        else:
            feats, layout, sps = per_sp[tgt], names, (tgt, tgt, tgt)
        seqs += pack_segments(feats, labels, segment_s, grid, layout, tgt, sps, f"{prefix}sp{tgt}_")
    return seqs


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------

def fseq_bytes(seq: FeatureSequence) -> bytes:
    head = json.dumps(seq.header(), sort_keys=True).encode()
    return (FSEQ_MAGIC + head + b"\n"
            + np.ascontiguousarray(seq.features, dtype="<f8").tobytes()
            + np.ascontiguousarray(seq.labels, dtype=np.uint8).tobytes())


def write_fseq(path, seq: FeatureSequence) -> Path:
    path = Path(path)
    path.write_bytes(fseq_bytes(seq))
    return path


def read_fseq(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if not raw.startswith(FSEQ_MAGIC):
        raise FormatError(f"{path}: not an FSEQ1 file")
    end = raw.index(b"\n", len(FSEQ_MAGIC))
    try:
        head = json.loads(raw[len(FSEQ_MAGIC):end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header: {exc}") from None
    if head.get("format") != "FSEQ1":
        raise FormatError(f"{path}: schema version {head.get('format')!r} not supported")
    T, D = head["T"], head["D"]
    body = raw[end + 1:]
    if len(body) != 8 * T * D + T:
        raise FormatError(f"{path}: payload size does not match T={T}, D={D}")
    feats = np.frombuffer(body[:8 * T * D], dtype="<f8").reshape(T, D).copy()
    labels = np.frombuffer(body[8 * T * D:], dtype=np.uint8).copy()
    return FeatureSequence(head["segment_id"], head["sp"], feats, labels, head["layout"],
                           tuple(head["sps"]), head.get("start_frame", 0))


def write_feature_csv(path, seqs) -> Path:
    """Base features of the target SP plus the label, one row per frame."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "frame", *BASE_FEATURES, "label"])
        for seq in seqs:
            cols = []
            for name in BASE_FEATURES:
                key = f"target/{name}" if f"target/{name}" in seq.layout else name
                cols.append(seq.layout.index(key))
            for t in range(seq.T):
                row = [repr(float(v)) for v in seq.features[t, cols]]
                writer.writerow([seq.segment_id, seq.start_frame + t, *row, CLASSES[seq.labels[t]]])
    return path

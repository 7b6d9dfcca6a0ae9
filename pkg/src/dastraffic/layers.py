"""LSTM / bi-LSTM, spatial and temporal self-attention, and the architecture composer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .errors import ConfigError, FormatError

ARCHS = (
    "lstm", "bi",
    "bi-TA", "TA-bi", "bi-SA", "SA-bi",
    "SA-bi-TA", "TA-bi-SA", "SA-TA-bi", "TA-SA-bi", "bi-SA-TA", "bi-TA-SA",
)
MDL_MAGIC = b"MDL1\n"


@dataclass
class ModelSpec:
    arch: str
    input_dim: int
    hidden: int = 128
    layers: int = 1
    dropout: float = 0.0
    num_classes: int = 3
    d_k: int | None = None
    residual: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {', '.join(ARCHS)}")
        if self.input_dim < 1 or self.hidden < 1 or self.layers < 1:
            raise ConfigError("input_dim, hidden and layers must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.d_k is not None and self.d_k < 1:
            raise ConfigError("d_k must be >= 1")
        return self

    @property
    def stages(self) -> list[str]:
        return self.arch.split("-")

    @property
    def bidirectional(self) -> bool:
        return "bi" in self.stages

    @property
    def effective_hidden(self) -> int:
        """Hidden size after rounding so that SA after the bi-LSTM can split 2h into 3 chunks."""
        st = self.stages
        if "bi" in st and "SA" in st[st.index("bi") + 1:]:
            return -(-self.hidden // 3) * 3
        return self.hidden

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Parameters and init
# --------------------------------------------------------------------------

def _uniform(rng, fan_in, shape, name):
    bound = 1.0 / np.sqrt(fan_in)
    return E.parameter(rng.uniform(-bound, bound, shape), name=name)


@dataclass
class LstmParams:
    """One direction of one layer.  Stored for row-vector inputs: x @ W, h @ U.

    Gate blocks along the last axis are ordered i, f, g, o.
    """

    W: E.Tensor  # (d_in, 4h)
    U: E.Tensor  # (h, 4h)
    b: E.Tensor  # (4h,)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @classmethod
    def init(cls, d_in, h, rng, prefix=""):
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return cls(_uniform(rng, d_in, (d_in, 4 * h), prefix + "W"),
                   _uniform(rng, h, (h, 4 * h), prefix + "U"),
                   E.parameter(b, name=prefix + "b"))

    def tensors(self):
        return {"W": self.W, "U": self.U, "b": self.b}


@dataclass
class AttentionParams:
    W_Q: E.Tensor  # (d_model, d_k)
    W_K: E.Tensor
    W_V: E.Tensor
    W_O: E.Tensor  # (d_k, d_model)

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, d_model, d_k, rng, prefix=""):
        return cls(_uniform(rng, d_model, (d_model, d_k), prefix + "W_Q"),
                   _uniform(rng, d_model, (d_model, d_k), prefix + "W_K"),
                   _uniform(rng, d_model, (d_model, d_k), prefix + "W_V"),
                   _uniform(rng, d_k, (d_k, d_model), prefix + "W_O"))

    def tensors(self):
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}


# --------------------------------------------------------------------------
# Recurrent layers
# --------------------------------------------------------------------------

def lstm_cell(x_t, h_prev, c_prev, params: LstmParams):
    """One LSTM step on (batch, d) or (d,) inputs; returns (h_t, c_t)."""
    vec = np.ndim(x_t.data if isinstance(x_t, E.Tensor) else x_t) == 1
    if vec:
        x_t = E.reshape(x_t, (1, -1))
        h_prev = E.reshape(h_prev, (1, -1))
        c_prev = E.reshape(c_prev, (1, -1))
    z = E.add(E.add(E.matmul(x_t, params.W), E.matmul(h_prev, params.U)), params.b)
    h_t, c_t = _lstm_update(z, c_prev, params.hidden)
    if vec:
        return E.reshape(h_t, (-1,)), E.reshape(c_t, (-1,))
    return h_t, c_t


def _lstm_update(z, c_prev, h):
    i = E.sigmoid(E.slice_last(z, 0, h))
    f = E.sigmoid(E.slice_last(z, h, 2 * h))
    g = E.tanh(E.slice_last(z, 2 * h, 3 * h))
    o = E.sigmoid(E.slice_last(z, 3 * h, 4 * h))
    c_t = E.add(E.mul(f, c_prev), E.mul(i, g))
    h_t = E.mul(o, E.tanh(c_t))
    return h_t, c_t


def lstm_direction(x, params: LstmParams, reverse: bool = False) -> E.Tensor:
    """Run one direction over a (batch, T, d) sequence; returns (batch, T, h)."""
    B, T = x.shape[0], x.shape[1]
    h = params.hidden
    xw = E.add(E.matmul(x, params.W), params.b)
    h_t = E.Tensor(np.zeros((B, h)))
    c_t = E.Tensor(np.zeros((B, h)))
    outs = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = E.add(E.take(xw, t, axis=1), E.matmul(h_t, params.U))
        h_t, c_t = _lstm_update(z, c_t, h)
        outs[t] = h_t
    return E.stack(outs, axis=1)


def _batched(x):
    x = x if isinstance(x, E.Tensor) else E.Tensor(x)
    if x.ndim == 2:
        return E.reshape(x, (1,) + x.shape), True
    return x, False


def bilstm(seq, layers, dropout: float = 0.0, training: bool = False, rng=None) -> E.Tensor:
    """Stacked (bi)directional LSTM.

    ``layers`` is a list whose items are either ``(fwd,)`` or ``(fwd, bwd)``
    LstmParams.  Output per frame is ``[h_fwd | h_bwd]`` for bidirectional layers.
    """
    x, squeeze = _batched(seq)
    for li, dirs in enumerate(layers):
        if li > 0:
            x = E.dropout(x, dropout, training, rng)
        outs = [lstm_direction(x, dirs[0])]
        if len(dirs) > 1:
            outs.append(lstm_direction(x, dirs[1], reverse=True))
        x = outs[0] if len(outs) == 1 else E.concat(outs, axis=-1)
    if squeeze:
        x = E.reshape(x, x.shape[1:])
    return x


# --------------------------------------------------------------------------
# Attention
# --------------------------------------------------------------------------

def attention_weights(scores) -> E.Tensor:
    """Row softmax of (already scaled) attention scores."""
    return E.softmax_rows(scores)


def self_attention(X, p: AttentionParams):
    """Scaled dot-product self-attention over the second-to-last axis.

    Returns ``(output, weights)`` with output width restored to d_model.
    """
    Q = E.matmul(X, p.W_Q)
    K = E.matmul(X, p.W_K)
    V = E.matmul(X, p.W_V)
    scores = E.scale(E.matmul(Q, E.transpose(K)), 1.0 / np.sqrt(p.d_k))
    A = attention_weights(scores)
    context = E.matmul(A, V)
    return E.matmul(context, p.W_O), A


def temporal_attention(F, p: AttentionParams, residual: bool = False):
    """Self-attention across frames of a (T, d) or (batch, T, d) sequence."""
    x, squeeze = _batched(F)
    out, A = self_attention(x, p)
    if residual:
        out = E.add(out, x)
    if squeeze:
        out, A = E.reshape(out, out.shape[1:]), E.reshape(A, A.shape[1:])
    return out, A


def spatial_attention(F, p: AttentionParams, residual: bool = False):
    """Self-attention among the three SP tokens inside every frame.

    The frame vector is split into 3 equal contiguous chunks; weights come
    back as (..., T, 3, 3).
    """
    x, squeeze = _batched(F)
    B, T, D = x.shape
    if D % 3:
        raise ConfigError(f"spatial attention needs a width divisible by 3, got {D}")
    tokens = E.reshape(x, (B, T, 3, D // 3))
    out, A = self_attention(tokens, p)
    out = E.reshape(out, (B, T, D))
    if residual:
        out = E.add(out, x)
    if squeeze:
        out, A = E.reshape(out, out.shape[1:]), E.reshape(A, A.shape[1:])
    return out, A


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class Model:
    """A composed stage pipeline followed by a frame-wise linear classifier."""

    def __init__(self, spec: ModelSpec, stages, W_c, b_c, seed=None):
        self.spec = spec
        self.stages = stages  # list of (kind, payload)
        self.W_c = W_c
        self.b_c = b_c
        self.seed = seed
        self.input_mean = np.zeros(spec.input_dim)
        self.input_scale = np.ones(spec.input_dim)

    def parameters(self) -> dict:
        out = {}
        for si, (kind, payload) in enumerate(self.stages):
            if kind in ("SA", "TA"):
                for k, t in payload.tensors().items():
                    out[f"s{si}.{kind}.{k}"] = t
            else:
                for li, dirs in enumerate(payload):
                    for di, d in enumerate(dirs):
                        for k, t in d.tensors().items():
                            out[f"s{si}.{kind}.l{li}.{'fb'[di]}.{k}"] = t
        out["classifier.W"] = self.W_c
        out["classifier.b"] = self.b_c
        return out

    def buffers(self) -> dict:
        return {"input_mean": self.input_mean, "input_scale": self.input_scale}

    @property
    def has_attention(self) -> bool:
        return any(kind in ("SA", "TA") for kind, _ in self.stages)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.input_mean) / self.input_scale

    def forward(self, x, training: bool = False, rng=None):
        """Logits (…, T, classes) and a dict of attention weights keyed by stage name."""
        if isinstance(x, E.Tensor):
            xt = x
        else:
            xt = E.Tensor(self.normalize(x))
        h, squeeze = _batched(xt)
        attn = {}
        for si, (kind, payload) in enumerate(self.stages):
            if kind == "SA":
                h, A = spatial_attention(h, payload, self.spec.residual)
                attn[f"s{si}.SA"] = A
            elif kind == "TA":
                h, A = temporal_attention(h, payload, self.spec.residual)
                attn[f"s{si}.TA"] = A
            else:
                h = bilstm(h, payload, self.spec.dropout, training, rng)
        logits = E.add(E.matmul(h, self.W_c), self.b_c)
        if squeeze:
            logits = E.reshape(logits, logits.shape[1:])
            attn = {k: E.reshape(A, A.shape[1:]) for k, A in attn.items()}
        return logits, attn

    def predict_proba(self, x) -> np.ndarray:
        with E.no_grad():
            logits, _ = self.forward(x)
        return np.exp(E.log_softmax(logits.data))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1).astype(np.uint8)

    def state(self) -> dict:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state(self, state: dict):
        params = self.parameters()
        for k, v in state.items():
            if k not in params or params[k].shape != np.shape(v):
                raise FormatError(f"parameter {k!r} does not fit this model")
            params[k].data[...] = v


def compose(spec: ModelSpec, seed: int = 0, rng: np.random.Generator | None = None) -> Model:
    """Instantiate the stages of ``spec.arch`` left to right."""
    spec.validate()
    rng = rng or np.random.default_rng(seed)
    h = spec.effective_hidden
    width = spec.input_dim
    stages = []
    for si, kind in enumerate(spec.stages):
        prefix = f"s{si}.{kind}."
        if kind == "SA":
            if width % 3:
                raise ConfigError(f"SA at stage {si} needs a width divisible by 3, got {width}")
            d_sp = width // 3
            d_k = spec.d_k or min(d_sp, 128)
            stages.append(("SA", AttentionParams.init(d_sp, d_k, rng, prefix)))
        elif kind == "TA":
            d_k = spec.d_k or min(width, 128)
            stages.append(("TA", AttentionParams.init(width, d_k, rng, prefix)))
        else:
            n_dirs = 2 if kind == "bi" else 1
            layers = []
            for li in range(spec.layers):
                d_in = width if li == 0 else h * n_dirs
                layers.append(tuple(LstmParams.init(d_in, h, rng, f"{prefix}l{li}.{'fb'[d]}.")
                                    for d in range(n_dirs)))
            stages.append((kind, layers))
            width = h * n_dirs
    W_c = _uniform(rng, width, (width, spec.num_classes), "classifier.W")
    b_c = E.parameter(np.zeros(spec.num_classes), name="classifier.b")
    return Model(spec, stages, W_c, b_c, seed)


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.parameters().values()))


def expected_param_count(spec: ModelSpec) -> int:
    """Closed-form parameter count for a spec (no model instantiated)."""
    h = spec.effective_hidden
    width = spec.input_dim
    total = 0
    for kind in spec.stages:
        if kind == "SA":
            d_sp = width // 3
            d_k = spec.d_k or min(d_sp, 128)
            total += 3 * d_sp * d_k + d_k * d_sp
        elif kind == "TA":
            d_k = spec.d_k or min(width, 128)
            total += 3 * width * d_k + d_k * width
        else:
            dirs = 2 if kind == "bi" else 1
            for li in range(spec.layers):
                d_in = width if li == 0 else h * dirs
                total += dirs * 4 * (d_in * h + h * h + h)
            width = h * dirs
    return total + width * spec.num_classes + spec.num_classes


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def checkpoint_bytes(model: Model) -> bytes:
    tensors = dict(model.parameters())
    tensors.update({f"buffer.{k}": v for k, v in model.buffers().items()})
    layout = [{"name": k, "shape": list(np.shape(v.data if isinstance(v, E.Tensor) else v))}
              for k, v in tensors.items()]
    head = {"format": "MDL1", "spec": model.spec.to_dict(), "layout": layout, "seed": model.seed}
    body = b"".join(np.ascontiguousarray(v.data if isinstance(v, E.Tensor) else v, dtype="<f4").tobytes()
                    for v in tensors.values())
    return MDL_MAGIC + json.dumps(head, sort_keys=True).encode() + b"\n" + body


def save_model(path, model: Model) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_model(path) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(MDL_MAGIC):
        raise FormatError(f"{path}: not an MDL1 checkpoint")
    end = raw.index(b"\n", len(MDL_MAGIC))
    head = json.loads(raw[len(MDL_MAGIC):end])
    if head.get("format") != "MDL1":
        raise FormatError(f"{path}: schema version {head.get('format')!r} not supported")
    model = compose(ModelSpec(**head["spec"]), seed=head.get("seed") or 0)
    params = model.parameters()
    offset = end + 1
    for item in head["layout"]:
        n = int(np.prod(item["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(item["shape"])
        offset += 4 * n
        name = item["name"]
        if name.startswith("buffer."):
            setattr(model, name[len("buffer."):], arr.copy())
        elif name in params and params[name].shape == arr.shape:
            params[name].data[...] = arr
        else:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
    if offset != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return model

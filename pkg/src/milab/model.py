"""Attention-MIL models with joint or additive predictor composition.

A model is featurizer ``f`` (2-layer ReLU MLP), an optional single-layer
self-attention mixer, an attention scorer ``psi_m`` (tanh MLP to a scalar)
and a predictor ``psi_p`` (2-layer ReLU MLP to C logits).

``joint``    logits = psi_p(sum_i alpha_i f(x_i))
``additive`` logits = sum_i psi_p(alpha_i f(x_i)); the pre-sum C x N terms
             are returned as the contribution map.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

POOLINGS = ("mean", "attention", "self-attention")
COMPOSITIONS = ("joint", "additive")


class UnsupportedVariantError(ValueError):
    """Operation not defined for the model's pooling variant or composition."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass(frozen=True)
class MilConfig:
    input_dim: int = 16
    feature_dim: int = 32
    featurizer_hidden: int = 32
    attention_hidden: int = 16
    predictor_hidden: int = 16
    num_classes: int = 3
    pooling: str = "attention"
    composition: str = "additive"
    self_attention_heads: int = 1
    centered_predictor: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in ("input_dim", "feature_dim", "featurizer_hidden", "attention_hidden",
                  "predictor_hidden", "self_attention_heads"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}, got {self.composition!r}")

    @classmethod
    def from_dict(cls, d: dict) -> MilConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(config: MilConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, fully determined by the config."""
    D, F, H = config.input_dim, config.feature_dim, config.featurizer_hidden
    A, P, C = config.attention_hidden, config.predictor_hidden, config.num_classes
    shapes = {
        "f.W1": (D, H), "f.b1": (H,), "f.W2": (H, F), "f.b2": (F,),
    }
    if config.pooling == "self-attention":
        dk = max(1, F // config.self_attention_heads)
        for h in range(config.self_attention_heads):
            shapes[f"mix.{h}.Wq"] = (F, dk)
            shapes[f"mix.{h}.Wk"] = (F, dk)
            shapes[f"mix.{h}.Wv"] = (F, dk)
            shapes[f"mix.{h}.Wo"] = (dk, F)
    if config.pooling != "mean":
        shapes.update({"m.W1": (F, A), "m.b1": (A,), "m.W2": (A, 1)})
    shapes.update({"p.W1": (F, P), "p.b1": (P,), "p.W2": (P, C), "p.b2": (C,)})
    return shapes


class MilModel:
    """Parameters plus config. ``params`` maps names to leaf tensors."""

    def __init__(self, config: MilConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        shapes = param_shapes(config)
        if params is None:
            params = _init_params(shapes, config.seed)
        missing = set(shapes) - set(params)
        extra = set(params) - set(shapes)
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def copy(self) -> MilModel:
        return MilModel(self.config, self.state_dict())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _init_params(shapes: dict[str, tuple[int, ...]], seed: int) -> dict[str, np.ndarray]:
    # uniform fan-in scaling (gain 2 ahead of a ReLU, 1 otherwise); zero biases
    relu_fed = {"f.W1", "f.W2", "p.W1"}
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            out[name] = np.zeros(shape)
            continue
        gain = 2.0 if name in relu_fed else 1.0
        bound = np.sqrt(3.0 * gain / shape[0])
        out[name] = rng.uniform(-bound, bound, size=shape)
    return out


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class BagOutput:
    logits: Tensor
    attention: Tensor
    contributions: Tensor | None = None  # C x N, additive only

    @property
    def contribution_values(self) -> np.ndarray | None:
        return None if self.contributions is None else self.contributions.data


def _linear(x: Tensor, W: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, W)
    return y if b is None else ad.add_bias(y, b)


def _instances(bag) -> Tensor:
    x = getattr(bag, "instances", bag)
    return x if isinstance(x, Tensor) else Tensor(x)


def featurize(model: MilModel, bag) -> Tensor:
    """Per-instance featurizer, N x D -> N x D'."""
    x = _instances(bag)
    D = model.config.input_dim
    if x.data.ndim != 2 or x.shape[1] != D or x.shape[0] < 1:
        raise ad.DimensionError(f"bag must be N x {D} with N >= 1, got {x.shape}")
    p = model.params
    h = ad.relu(_linear(x, p["f.W1"], p["f.b1"]))
    return ad.relu(_linear(h, p["f.W2"], p["f.b2"]))


def attention_logits(model: MilModel, features: Tensor) -> Tensor:
    """Raw scorer output psi_m, one value per instance (length N)."""
    if model.config.pooling == "mean":
        raise UnsupportedVariantError("mean pooling has no attention module")
    p = model.params
    h = ad.tanh(_linear(features, p["m.W1"], p["m.b1"]))
    s = ad.matmul(h, p["m.W2"])
    return ad.reshape(s, (features.shape[0],))


def attention_weights(model: MilModel, features: Tensor) -> Tensor:
    """alpha = softmax over instances of psi_m(features)."""
    return ad.softmax_rows(attention_logits(model, features))


def self_attention_mix(model: MilModel, features: Tensor) -> Tensor:
    """One scaled dot-product self-attention layer with a residual connection."""
    cfg = model.config
    if cfg.pooling != "self-attention":
        raise UnsupportedVariantError(f"self-attention mixer not present for pooling={cfg.pooling!r}")
    p = model.params
    out = features
    for h in range(cfg.self_attention_heads):
        q = ad.matmul(features, p[f"mix.{h}.Wq"])
        k = ad.matmul(features, p[f"mix.{h}.Wk"])
        v = ad.matmul(features, p[f"mix.{h}.Wv"])
        dk = q.shape[1]
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
        attn = ad.softmax(scores, axis=1)
        out = ad.add(out, ad.matmul(ad.matmul(attn, v), p[f"mix.{h}.Wo"]))
    return out


def pool(model: MilModel, features: Tensor, alpha: Tensor | None) -> tuple[Tensor, Tensor]:
    """Attended representations m_i = alpha_i * f(x_i) and their sum.

    With ``alpha=None`` the uniform weights 1/N of mean pooling are used.
    """
    N = features.shape[0]
    if alpha is None:
        alpha = Tensor(np.full(N, 1.0 / N))
    alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
    if alpha.data.ndim != 1 or alpha.shape[0] != N:
        raise ad.DimensionError(f"alpha length {alpha.shape} does not match {N} instances")
    m = ad.scale_rows(features, alpha)
    return m, ad.sum_axis(m, 0)


def _centering(C: int) -> Tensor:
    return Tensor(np.eye(C) - np.full((C, C), 1.0 / C))


def predictor(model: MilModel, reps: Tensor) -> Tensor:
    """psi_p applied row-wise: K x D' -> K x C.

    With ``centered_predictor`` the output layer is projected onto
    zero-sum-over-classes weights, so every row of the result sums to 0.
    Softmax outputs are unaffected; the sign of a contribution then says
    whether an instance favours a class relative to the others.
    """
    p = model.params
    h = ad.relu(_linear(reps, p["p.W1"], p["p.b1"]))
    W, b = p["p.W2"], p["p.b2"]
    if model.config.centered_predictor:
        P = _centering(model.config.num_classes)
        W = ad.matmul(W, P)
        b = ad.reshape(ad.matmul(ad.reshape(b, (1, b.shape[0])), P), (b.shape[0],))
    return _linear(h, W, b)


def forward(model: MilModel, bag, alpha=None) -> BagOutput:
    """Run the model on one bag.

    ``alpha`` optionally freezes the attention weights (length-N array);
    used for fixed-context credit analysis.
    """
    cfg = model.config
    feats = featurize(model, bag)
    N = feats.shape[0]
    if cfg.pooling == "self-attention":
        feats = self_attention_mix(model, feats)
    if alpha is not None:
        weights = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float64))
    elif cfg.pooling == "mean":
        weights = Tensor(np.full(N, 1.0 / N))
    else:
        weights = attention_weights(model, feats)
    m, pooled = pool(model, feats, weights)
    if cfg.composition == "joint":
        logits = ad.reshape(predictor(model, ad.reshape(pooled, (1, pooled.shape[0]))), (cfg.num_classes,))
        return BagOutput(logits=logits, attention=weights)
    per_instance = predictor(model, m)  # N x C
    contributions = ad.transpose(per_instance)  # C x N
    logits = ad.sum_axis(contributions, 1)
    return BagOutput(logits=logits, attention=weights, contributions=contributions)


def predict_logits(model: MilModel, bag, alpha=None) -> np.ndarray:
    with ad.no_grad():
        return forward(model, bag, alpha).logits.data.copy()


def bag_loss(model: MilModel, bag, label: int) -> Tensor:
    return ad.cross_entropy(forward(model, bag).logits, int(label))


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout (all integers little-endian):
#   bytes 0..7    magic b"MILABCK\x00"
#   bytes 8..11   u32 format version (1)
#   bytes 12..19  u64 header length H
#   next H bytes  UTF-8 JSON header:
#                 {"config": {...}, "params": [{"name", "shape", "offset", "count"}, ...],
#                  "meta": {...}}
#   remainder     concatenated parameter arrays, float64 little-endian,
#                 row-major, at the byte offsets given in the header
#                 (offsets relative to the start of the remainder)

CHECKPOINT_MAGIC = b"MILABCK\x00"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: MilModel, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(t.data.size)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "params": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)


def model_from_bytes(blob: bytes) -> tuple[MilModel, dict]:
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a milab checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if 20 + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    body = blob[20 + hlen:]
    params = {}
    for e in header["params"]:
        start, n = e["offset"], e["count"]
        if start + 8 * n > len(body):
            raise CheckpointError(f"truncated data for parameter {e['name']}")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=start).astype(np.float64)
        params[e["name"]] = arr.reshape(e["shape"])
    config = MilConfig.from_dict(header["config"])
    return MilModel(config, params), header.get("meta", {})


def save_model(model: MilModel, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, meta))


def load_model(path) -> tuple[MilModel, dict]:
    return model_from_bytes(Path(path).read_bytes())


def params_digest(model: MilModel) -> str:
    h = hashlib.sha256()
    for name, t in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()

"""Trainable classification head on frozen features.

Layer order: linear -> ReLU [-> linear -> ReLU] -> dropout -> linear -> softmax.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .corpus import ClassWeights
from .errors import ConfigError, DataError, NumericError

N_CLASSES = 2
LOG_CLAMP = 1e-12
HEAD_FORMAT = "xhate-head/1"


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class HeadSpec:
    d_model: int
    d_hidden: int = 512
    dropout_p: float = 0.1
    extra_dense: bool = False
    use_dropout: bool = True
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.n_classes != N_CLASSES:
            raise ConfigError("the head is binary; n_classes must be 2")
        if self.d_model < 1 or self.d_hidden < 1:
            raise ConfigError("d_model and d_hidden must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    @property
    def dropout_active(self) -> bool:
        return self.use_dropout and self.dropout_p > 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W1b: np.ndarray | None = None
    b1b: np.ndarray | None = None

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield f.name, value

    def map(self, fn) -> "HeadParams":
        return HeadParams(**{name: fn(arr) for name, arr in self.items()})

    def copy(self) -> "HeadParams":
        return self.map(np.copy)

    def zeros_like(self) -> "HeadParams":
        return self.map(np.zeros_like)

    def check_shapes(self, spec: HeadSpec) -> None:
        expected = {
            "W1": (spec.d_hidden, spec.d_model),
            "b1": (spec.d_hidden,),
            "W2": (N_CLASSES, spec.d_hidden),
            "b2": (N_CLASSES,),
        }
        if spec.extra_dense:
            expected.update(W1b=(spec.d_hidden, spec.d_hidden), b1b=(spec.d_hidden,))
        got = {name: arr.shape for name, arr in self.items()}
        if got != expected:
            raise ConfigError(f"head parameter shapes {got} do not match spec {expected}")

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.items():
            h.update(f"{name}{arr.shape}".encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(arr * arr)) for _, arr in self.items())))


@dataclass(frozen=True)
class Prediction:
    probs: tuple
    label: int


def init_head(spec: HeadSpec, seed: int = 0) -> HeadParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)

    def glorot(fan_out, fan_in):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-s, s, size=(fan_out, fan_in))

    params = HeadParams(
        W1=glorot(spec.d_hidden, spec.d_model),
        b1=np.zeros(spec.d_hidden),
        W2=None,
        b2=np.zeros(N_CLASSES),
    )
    if spec.extra_dense:
        params.W1b = glorot(spec.d_hidden, spec.d_hidden)
        params.b1b = np.zeros(spec.d_hidden)
    params.W2 = glorot(N_CLASSES, spec.d_hidden)
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = x[None, :] if single else x
    if x.ndim != 2:
        raise DataError("features must be a vector or a matrix")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite value in head input")
    return x, single


def _forward(x, params: HeadParams, spec: HeadSpec, mode: Mode, dropout_mask=None, rng=None) -> dict:
    if x.shape[1] != spec.d_model:
        raise DataError(f"feature width {x.shape[1]} != d_model {spec.d_model}")
    cache = {"x": x}
    with np.errstate(over="ignore", invalid="ignore"):
        z1 = x @ params.W1.T + params.b1
        a = np.maximum(z1, 0.0)
    cache["z1"], cache["a1"] = z1, a
    if spec.extra_dense:
        z1b = a @ params.W1b.T + params.b1b
        a = np.maximum(z1b, 0.0)
        cache["z1b"] = z1b
    cache["a"] = a
    scale = None
    if Mode(mode) is Mode.TRAIN and spec.dropout_active:
        if dropout_mask is None:
            if rng is None:
                raise ConfigError("TRAIN mode with dropout needs a mask or a seeded generator")
            dropout_mask = rng.random(a.shape) >= spec.dropout_p
        scale = np.broadcast_to(np.asarray(dropout_mask, dtype=np.float64), a.shape) / (1.0 - spec.dropout_p)
        a = a * scale
    cache["scale"] = scale
    cache["h"] = a
    with np.errstate(over="ignore", invalid="ignore"):
        cache["logits"] = a @ params.W2.T + params.b2
    if not np.all(np.isfinite(cache["logits"])):
        raise NumericError("non-finite logits (overflow inside the head)")
    cache["probs"] = softmax(cache["logits"])
    return cache


def head_forward(x, params: HeadParams, spec: HeadSpec, mode: Mode | str = Mode.EVAL, dropout_mask=None, rng=None):
    """Return ``(probs, hidden)``; hidden is the (dropped-out) input to the output layer."""
    x, single = _as_batch(x)
    cache = _forward(x, params, spec, Mode(mode), dropout_mask, rng)
    if single:
        return cache["probs"][0], cache["h"][0]
    return cache["probs"], cache["h"]


def predict_labels(probs: np.ndarray) -> np.ndarray:
    # exact ties go to class 0
    return (probs[..., 1] > probs[..., 0]).astype(np.int64)


def predict(x, params: HeadParams, spec: HeadSpec):
    """EVAL-mode prediction for one vector (-> Prediction) or a matrix (-> list)."""
    probs, _ = head_forward(x, params, spec, Mode.EVAL)
    if probs.ndim == 1:
        return Prediction(tuple(float(p) for p in probs), int(predict_labels(probs)))
    labels = predict_labels(probs)
    return [Prediction((float(p[0]), float(p[1])), int(y)) for p, y in zip(probs, labels)]


def _weights_array(weights: ClassWeights | None) -> np.ndarray:
    return np.ones(N_CLASSES) if weights is None else np.asarray(weights.w, dtype=np.float64)


def weighted_cross_entropy(probs, gold, weights: ClassWeights | None = None) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.int64)
    if probs.ndim != 2 or len(gold) == 0:
        raise DataError("loss is undefined for an empty batch")
    if len(gold) != len(probs):
        raise DataError("probabilities and labels are misaligned")
    w = _weights_array(weights)[gold]
    p = probs[np.arange(len(gold)), gold]
    return float(np.sum(w * -np.log(np.maximum(p, LOG_CLAMP))) / np.sum(w))


def loss_and_gradients(
    x, gold, params: HeadParams, spec: HeadSpec, weights: ClassWeights | None = None,
    dropout_masks=None, rng=None,
) -> tuple[float, HeadParams]:
    """Weighted CE of a batch and its gradient with respect to every head parameter.

    With dropout active the forward pass runs in TRAIN mode using
    ``dropout_masks`` (or masks drawn from ``rng``); otherwise EVAL mode.
    """
    x, _ = _as_batch(x)
    gold = np.asarray(gold, dtype=np.int64)
    if len(gold) == 0:
        raise DataError("loss is undefined for an empty batch")
    mode = Mode.TRAIN if spec.dropout_active and (dropout_masks is not None or rng is not None) else Mode.EVAL
    c = _forward(x, params, spec, mode, dropout_masks, rng)
    probs = c["probs"]
    n = len(gold)
    w = _weights_array(weights)[gold]
    p_gold = probs[np.arange(n), gold]
    loss = float(np.sum(w * -np.log(np.maximum(p_gold, LOG_CLAMP))) / np.sum(w))

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), gold] = 1.0
    # rows whose gold probability hit the log clamp contribute a constant
    active = (p_gold > LOG_CLAMP).astype(np.float64)
    dlogits = (probs - onehot) * (w * active / np.sum(w))[:, None]

    g = {}
    g["W2"] = dlogits.T @ c["h"]
    g["b2"] = dlogits.sum(axis=0)
    da = dlogits @ params.W2
    if c["scale"] is not None:
        da = da * c["scale"]
    if spec.extra_dense:
        dz = da * (c["z1b"] > 0)
        g["W1b"] = dz.T @ c["a1"]
        g["b1b"] = dz.sum(axis=0)
        da = dz @ params.W1b
    dz1 = da * (c["z1"] > 0)
    g["W1"] = dz1.T @ x
    g["b1"] = dz1.sum(axis=0)
    return loss, HeadParams(**g)


def head_gradients(x, gold, params, spec, weights=None, dropout_masks=None) -> HeadParams:
    return loss_and_gradients(x, gold, params, spec, weights, dropout_masks)[1]


# --------------------------------------------------------------------------
# persistence


def head_to_json(params: HeadParams, spec: HeadSpec) -> str:
    doc = {
        "format": HEAD_FORMAT,
        "spec": spec.to_dict(),
        "arrays": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in np.asarray(arr, dtype=np.float64).ravel()]}
            for name, arr in params.items()
        },
    }
    # json writes floats with repr(), which round-trips float64 exactly
    return json.dumps(doc, indent=1) + "\n"


def head_from_json(text: str) -> tuple[HeadParams, HeadSpec]:
    doc = json.loads(text)
    if doc.get("format") != HEAD_FORMAT:
        raise DataError(f"unsupported head file format {doc.get('format')!r}")
    spec = HeadSpec(**doc["spec"])
    arrays = {
        name: np.asarray(a["data"], dtype=np.float64).reshape(a["shape"]) for name, a in doc["arrays"].items()
    }
    params = HeadParams(**arrays)
    params.check_shapes(spec)
    return params, spec


def save_head(params: HeadParams, spec: HeadSpec, path) -> str:
    """Write the head file and return its SHA-256."""
    text = head_to_json(params, spec)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_head(path) -> tuple[HeadParams, HeadSpec]:
    return head_from_json(Path(path).read_text(encoding="utf-8"))

"""Two-part network: a ReLU MLP feature extractor followed by a linear head.

All arrays are float64 numpy arrays. Weight matrices are stored as
``(out_features, in_features)`` so a layer computes ``h @ W.T + b``.
Parameters are value objects: every array is marked read-only and every
operation returns fresh arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ArgumentError, DimensionError, FormatError, LabelError, NumericError

Layer = tuple[np.ndarray, np.ndarray]


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights of the feature extractor (``extractor``) and the classifier head."""

    extractor: tuple[Layer, ...]
    classifier: Layer

    def __post_init__(self):
        extractor = tuple((_frozen(w), _frozen(b)) for w, b in self.extractor)
        classifier = (_frozen(self.classifier[0]), _frozen(self.classifier[1]))
        object.__setattr__(self, "extractor", extractor)
        object.__setattr__(self, "classifier", classifier)
        width = None
        for i, (w, b) in enumerate(self.layers()):
            name = self._layer_name(i)
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise DimensionError(f"{name}: weight {w.shape} and bias {b.shape} disagree")
            if width is not None and w.shape[1] != width:
                raise DimensionError(f"{name}: expects input width {w.shape[1]}, previous layer gives {width}")
            width = w.shape[0]
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"{name}: non-finite parameter")

    def _layer_name(self, i: int) -> str:
        return f"extractor layer {i}" if i < len(self.extractor) else "classifier"

    def layers(self) -> Iterator[Layer]:
        yield from self.extractor
        yield self.classifier

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.classifier[0].shape[1]

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[1] if self.extractor else self.feature_dim

    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w, _ in self.layers()]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers()])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.shapes() != other.shapes():
            return False
        return all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers(), other.layers())
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Per-parameter gradients, laid out exactly like :class:`ModelParams`.

    ``input_grad`` is the gradient of the loss w.r.t. whatever entered the
    network (raw inputs when the extractor participated, features otherwise).
    """

    extractor: tuple[Layer, ...]
    classifier: Layer
    input_grad: np.ndarray | None = None

    def layers(self) -> Iterator[Layer]:
        yield from self.extractor
        yield self.classifier

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers()])


def init_params(input_dim: int, hidden: Sequence[int], feature_dim: int, num_classes: int, seed) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation of every weight and bias."""
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, feature_dim]

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    extractor = tuple(layer(a, b) for a, b in zip(widths[:-1], widths[1:]))
    return ModelParams(extractor, layer(feature_dim, num_classes))


def _as_batch(batch, width: int, what: str) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what}: expected shape (B, {width}), got {x.shape}")
    return x


def _extractor_forward(params: ModelParams, x: np.ndarray):
    """Return (pre-activations, layer inputs) for every extractor layer plus the output."""
    pre, inputs = [], []
    h = x
    for i, (w, b) in enumerate(params.extractor):
        if h.shape[1] != w.shape[1]:
            raise DimensionError(f"extractor layer {i}: expects input width {w.shape[1]}, got {h.shape[1]}")
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
    return pre, inputs, h


def forward_features(params: ModelParams, batch) -> np.ndarray:
    """Feature vectors ``f(x)`` of a ``(B, input_dim)`` batch."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batch must be 2-D, got shape {x.shape}")
    if not params.extractor and x.shape[1] != params.feature_dim:
        raise DimensionError(f"classifier: expects feature width {params.feature_dim}, got {x.shape[1]}")
    return _extractor_forward(params, x)[2]


def forward_logits(params: ModelParams, features) -> np.ndarray:
    """Classifier logits for real features or translated pseudo features."""
    f = _as_batch(features, params.feature_dim, "classifier")
    w, b = params.classifier
    return f @ w.T + b


def _softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, batch_size: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != batch_size:
        raise DimensionError(f"labels must be a vector of length {batch_size}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes}): min {y.min()}, max {y.max()}")
    return y.astype(np.int64)


def loss_and_grads(params: ModelParams, inputs, labels, train_extractor: bool = True,
                   want_input_grad: bool = False) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy and its exact gradients.

    With ``train_extractor`` the rows of ``inputs`` are raw samples and the
    whole network is differentiated. Otherwise they are features fed straight
    to the head and every extractor gradient is zero.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError(f"need a non-empty 2-D batch, got shape {x.shape}")
    y = _check_labels(labels, x.shape[0], params.num_classes)
    n = x.shape[0]

    if train_extractor:
        x = _as_batch(x, params.input_dim, "extractor layer 0" if params.extractor else "classifier")
        pre, ins, f = _extractor_forward(params, x)
    else:
        f = _as_batch(x, params.feature_dim, "classifier")
    w, b = params.classifier
    logits = f @ w.T + b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))

    delta = _softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    head = (delta.T @ f, delta.sum(axis=0))
    upstream = delta @ w

    if train_extractor:
        grads = []
        for (lw, _), z, h_in in zip(reversed(params.extractor), reversed(pre), reversed(ins)):
            dz = upstream * (z > 0)
            grads.append((dz.T @ h_in, dz.sum(axis=0)))
            upstream = dz @ lw
        extractor = tuple(reversed(grads))
    else:
        extractor = tuple((np.zeros_like(lw), np.zeros_like(lb)) for lw, lb in params.extractor)
    return loss, GradientSet(extractor, head, upstream if want_input_grad else None)


def extractor_vjp(params: ModelParams, batch, upstream) -> np.ndarray:
    """Pull a gradient on the features back to the raw inputs through the extractor."""
    x = _as_batch(batch, params.input_dim, "extractor layer 0" if params.extractor else "classifier")
    pre, _, _ = _extractor_forward(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    for (w, _), z in zip(reversed(params.extractor), reversed(pre)):
        g = (g * (z > 0)) @ w
    return g


def grad_input_jacobian(params: ModelParams, x, label: int) -> tuple[GradientSet, list[np.ndarray]]:
    """Parameter gradients of a single sample and their derivatives w.r.t. that sample.

    Forward-mode differentiation of the backward pass: for every input
    coordinate ``j`` the returned list holds ``d grad / d x_j`` stacked on a
    leading axis, one array per parameter in :meth:`GradientSet.flat` order
    (weight then bias, extractor layers first). ReLU masks are treated as
    locally constant.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != params.input_dim:
        raise DimensionError(f"sample width {x.shape[0]} != input_dim {params.input_dim}")
    _check_labels([label], 1, params.num_classes)
    d = x.shape[0]
    h, dh = x, np.eye(d)
    cache = []
    for w, b in params.extractor:
        z = w @ h + b
        mask = z > 0
        cache.append((w, mask, h, dh))
        h, dh = z * mask, (dh @ w.T) * mask
    f, df = h, dh
    v, c = params.classifier
    p = _softmax((v @ f + c)[None, :])[0]
    ds = df @ v.T
    dp = p * (ds - (ds @ p)[:, None])
    delta = p.copy()
    delta[label] -= 1.0
    ddelta = dp

    head = (np.outer(delta, f), delta.copy())
    dhead = [ddelta[:, :, None] * f[None, None, :] + delta[None, :, None] * df[:, None, :], ddelta]
    up, dup = delta @ v, ddelta @ v
    ext, dext = [], []
    for w, mask, h_in, dh_in in reversed(cache):
        dz, ddz = up * mask, dup * mask
        ext.append((np.outer(dz, h_in), dz))
        dext.append([ddz[:, :, None] * h_in[None, None, :] + dz[None, :, None] * dh_in[:, None, :], ddz])
        up, dup = dz @ w, ddz @ w
    ext.reverse()
    dext.reverse()
    jac = [a for pair in dext for a in pair] + dhead
    return GradientSet(tuple(ext), head, up), jac


def apply_sgd(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    """One plain SGD step ``p - lr * g``."""
    if lr < 0:
        raise ArgumentError(f"learning rate must be non-negative, got {lr}")
    pairs = list(zip(params.layers(), grads.layers()))
    for i, ((w, b), (gw, gb)) in enumerate(pairs):
        if w.shape != np.shape(gw) or b.shape != np.shape(gb):
            raise DimensionError(f"{params._layer_name(i)}: gradient shape mismatch")
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"{params._layer_name(i)}: non-finite gradient")
    new = [(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in pairs]
    return ModelParams(tuple(new[:-1]), new[-1])


def average_params(models: Sequence[ModelParams], weights: Sequence[float] | None = None) -> ModelParams:
    """Elementwise mean of congruent models (unweighted unless ``weights`` is given)."""
    if len(models) == 0:
        raise ArgumentError("cannot average an empty list of models")
    shapes = models[0].shapes()
    for m in models[1:]:
        if m.shapes() != shapes:
            raise DimensionError(f"shape mismatch while averaging: {m.shapes()} vs {shapes}")
    if weights is None:
        coef = np.full(len(models), 1.0 / len(models))
    else:
        coef = np.asarray(weights, dtype=np.float64)
        if coef.shape != (len(models),) or coef.sum() <= 0 or (coef < 0).any():
            raise ArgumentError("weights must be non-negative, one per model, with positive sum")
        coef = coef / coef.sum()

    def mean(arrays):
        out = np.zeros_like(arrays[0])
        for a, k in zip(arrays, coef):
            out += k * a
        return out

    per_layer = list(zip(*[list(m.layers()) for m in models]))
    layers = [(mean([w for w, _ in group]), mean([b for _, b in group])) for group in per_layer]
    return ModelParams(tuple(layers[:-1]), layers[-1])


def grow_classifier(params: ModelParams, new_num_classes: int, init_scale: float, rng_seed) -> ModelParams:
    """Append classifier rows; new weights ~ U(-init_scale, init_scale), new biases zero."""
    current = params.num_classes
    if new_num_classes < current:
        raise ArgumentError(f"cannot shrink classifier from {current} to {new_num_classes} classes")
    if new_num_classes == current:
        return params
    extra = new_num_classes - current
    if init_scale == 0:
        rows = np.zeros((extra, params.feature_dim))
    else:
        rows = np.random.default_rng(rng_seed).uniform(-init_scale, init_scale, (extra, params.feature_dim))
    w, b = params.classifier
    return ModelParams(params.extractor, (np.vstack([w, rows]), np.concatenate([b, np.zeros(extra)])))


# Wire format: u32 extractor layer count, then (rows, cols) u32 pairs for each
# extractor layer and the classifier; then for each layer W (row-major) and b
# as float64. Everything little-endian.
_U32 = struct.Struct("<I")


def header_size(num_extractor_layers: int) -> int:
    return 4 + 8 * (num_extractor_layers + 1)


def serialize_params(params: ModelParams) -> bytes:
    shapes = params.shapes()
    head = np.array([len(params.extractor)] + [n for s in shapes for n in s], dtype="<u4").tobytes()
    body = b"".join(
        np.asarray(w, dtype="<f8").tobytes() + np.asarray(b, dtype="<f8").tobytes() for w, b in params.layers()
    )
    return head + body


def serialized_size(params: ModelParams) -> int:
    return header_size(len(params.extractor)) + 8 * sum(r * c + r for r, c in params.shapes())


def deserialize_params(data: bytes) -> ModelParams:
    buf = memoryview(data)
    if len(buf) < 4:
        raise FormatError("missing layer count", len(buf))
    (count,) = _U32.unpack_from(buf, 0)
    need = header_size(count)
    if len(buf) < need:
        raise FormatError(f"header for {count} extractor layers truncated", len(buf))
    dims = np.frombuffer(buf, dtype="<u4", count=2 * (count + 1), offset=4).reshape(-1, 2)
    offset = need
    layers = []
    for i, (rows, cols) in enumerate(dims):
        rows, cols = int(rows), int(cols)
        if i > 0 and cols != layers[-1][0].shape[0]:
            raise FormatError(f"layer {i} input width {cols} does not chain", 4 + 8 * i)
        n = rows * cols + rows
        if len(buf) < offset + 8 * n:
            raise FormatError(f"parameters of layer {i} truncated", len(buf))
        vals = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)
        layers.append((vals[: rows * cols].reshape(rows, cols), vals[rows * cols:]))
        offset += 8 * n
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes", offset)
    return ModelParams(tuple(layers[:-1]), layers[-1])

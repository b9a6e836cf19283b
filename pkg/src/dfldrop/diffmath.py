"""Dense kernels and hand-derived gradients for softmax-linear models and ReLU MLPs.

Parameters live in a single flat float64 vector (:class:`ParamVec`). Every
layer is dense and stored as its weight matrix ``W`` (``in x out``, row-major)
followed by its bias ``b`` (``out``). Hidden layers use ReLU; the last layer
produces logits that go through a softmax.

Besides the usual first-order gradients this module differentiates the
*gradient-matching* distance ``d(grad_theta L(X', Y'), target)`` with respect
to the synthetic inputs and label logits. That is a second-order quantity; it
is computed by running the adjoint of the backward pass by hand, which works
for every depth because the operation set is fixed (affine, ReLU, softmax,
cross-entropy).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import CapabilityError, NumericDomainError, ShapeError

LOG_CLAMP = 1e-12
COSINE_CLAMP = 1e-12

LayerShape = tuple[str, int, int]


@dataclass(frozen=True, eq=False)
class ParamVec:
    """Flat parameter vector plus the layer layout it encodes.

    The underlying buffer is made read-only so a cached copy can never be
    mutated through an alias; "updating" a model always builds a new vector.
    """

    data: np.ndarray
    shapes: tuple[LayerShape, ...]

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True).ravel()
        shapes = tuple((str(k), int(i), int(o)) for k, i, o in self.shapes)
        expected = sum(i * o + o for _, i, o in shapes)
        if data.size != expected:
            raise ShapeError(f"parameter vector has {data.size} entries, layout needs {expected}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "shapes", shapes)

    def __len__(self):
        return self.data.size

    def with_data(self, data) -> "ParamVec":
        return ParamVec(data, self.shapes)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views per layer."""
        out, pos = [], 0
        for kind, n_in, n_out in self.shapes:
            if kind != "dense":
                raise CapabilityError(f"unsupported layer kind {kind!r}")
            W = self.data[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = self.data[pos:pos + n_out]
            pos += n_out
            out.append((W, b))
        return out

    def same_layout(self, other: "ParamVec") -> bool:
        return self.shapes == other.shapes

    def __eq__(self, other):
        return (isinstance(other, ParamVec) and self.shapes == other.shapes
                and np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.shapes, self.data.tobytes()))


def layer_shapes(n_features: int, n_classes: int, hidden: Sequence[int] = ()) -> tuple[LayerShape, ...]:
    dims = [n_features, *hidden, n_classes]
    return tuple(("dense", dims[i], dims[i + 1]) for i in range(len(dims) - 1))


def _as_matrix(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ShapeError(f"input has {X.shape[1]} columns, model expects {n_features}")
    return X


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericDomainError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# losses


def softmax(logits) -> np.ndarray:
    Z = _as_matrix(logits)
    _check_finite(Z, "logits")
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _softmax_vjp(P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    return P * (dP - np.sum(dP * P, axis=1, keepdims=True))


def label_matrix(labels, n: int, n_classes: int) -> np.ndarray:
    """Turn hard class indices or a soft label matrix into an ``n x C`` target."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, n_classes):
            raise ShapeError(f"soft labels have shape {labels.shape}, expected {(n, n_classes)}")
        return labels.astype(np.float64, copy=False)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    idx = labels.astype(np.int64)
    if np.any(idx != labels) or np.any(idx < 0) or np.any(idx >= n_classes):
        raise IndexError(f"labels must be integers in [0, {n_classes})")
    T = np.zeros((n, n_classes))
    T[np.arange(n), idx] = 1.0
    return T


def cross_entropy(probs, labels) -> float:
    """Mean cross-entropy; hard labels pick ``-log p[y]``, soft labels use ``-sum y log p``."""
    P = _as_matrix(probs)
    T = label_matrix(labels, P.shape[0], P.shape[1])
    return float(-np.sum(T * np.log(np.maximum(P, LOG_CLAMP))) / P.shape[0])


# --------------------------------------------------------------------------
# forward / backward


def forward(params: ParamVec, X) -> tuple[np.ndarray, list]:
    """Return logits and the per-layer cache ``[(h_in, z), ...]``."""
    layers = params.layers()
    h = _as_matrix(X, layers[0][0].shape[0])
    cache = []
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return h, cache


def predict_proba(params: ParamVec, X) -> np.ndarray:
    return softmax(forward(params, X)[0])


def _backward(params: ParamVec, cache: list, dlogits: np.ndarray, *, want_inputs: bool):
    layers = params.layers()
    grads = [None] * len(layers)
    delta = dlogits
    dX = None
    for i in range(len(layers) - 1, -1, -1):
        h, _ = cache[i]
        W, _ = layers[i]
        grads[i] = (h.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (cache[i - 1][1] > 0)
        elif want_inputs:
            dX = delta @ W.T
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return flat, dX


def grad_params(params: ParamVec, X, Y) -> ParamVec:
    """Gradient of the mean cross-entropy with respect to the parameters."""
    logits, cache = forward(params, X)
    P = softmax(logits)
    T = label_matrix(Y, *P.shape)
    flat, _ = _backward(params, cache, (P - T) / P.shape[0], want_inputs=False)
    return params.with_data(flat)


def grad_inputs(params: ParamVec, X, Y) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch."""
    logits, cache = forward(params, X)
    P = softmax(logits)
    T = label_matrix(Y, *P.shape)
    _, dX = _backward(params, cache, (P - T) / P.shape[0], want_inputs=True)
    return dX


def loss_and_grads(params: ParamVec, X, Y) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy with its parameter and input gradients in one pass."""
    logits, cache = forward(params, X)
    P = softmax(logits)
    T = label_matrix(Y, *P.shape)
    flat, dX = _backward(params, cache, (P - T) / P.shape[0], want_inputs=True)
    return cross_entropy(P, T), flat, dX


def vjp_probs(params: ParamVec, X, dP) -> tuple[np.ndarray, np.ndarray]:
    """Pull an upstream gradient on the output probabilities back to (params, inputs)."""
    logits, cache = forward(params, X)
    P = softmax(logits)
    return _backward(params, cache, _softmax_vjp(P, np.asarray(dP, dtype=np.float64)), want_inputs=True)


# --------------------------------------------------------------------------
# gradient matching


def match_distance(g: np.ndarray, target: np.ndarray, kind: str = "l2") -> tuple[float, np.ndarray]:
    """Distance between two flat gradients and its derivative with respect to ``g``.

    ``l2`` is the squared Euclidean distance; ``cosine`` is ``1 - cos(g, target)``
    over the whole flattened vectors.
    """
    if kind == "l2":
        diff = g - target
        return float(diff @ diff), 2.0 * diff
    if kind == "cosine":
        ng, nt = np.linalg.norm(g), np.linalg.norm(target)
        dot = float(g @ target)
        den = ng * nt
        if den < COSINE_CLAMP:
            return 1.0 - dot / COSINE_CLAMP, -target / COSINE_CLAMP
        grad = -(target / den - dot * g / (ng ** 3 * nt))
        return 1.0 - dot / den, grad
    raise ValueError(f"unknown distance {kind!r}")


def gradmatch(params: ParamVec, X, Y, target: ParamVec, distance: str = "l2"):
    """Gradient-matching distance and its gradients w.r.t. inputs and label logits.

    ``Y`` is either an ``n x C`` matrix of free label logits (soft labels are
    ``softmax(Y)``) or a vector of fixed hard labels, in which case the label
    gradient is ``None``.

    Returns ``(value, dX, dY)``.
    """
    if not target.same_layout(params):
        raise ShapeError("target gradient layout does not match the model")
    layers = params.layers()
    L = len(layers)
    X = _as_matrix(X, layers[0][0].shape[0])
    n = X.shape[0]
    Y = np.asarray(Y, dtype=np.float64)
    soft = Y.ndim == 2
    T = softmax(Y) if soft else label_matrix(Y, n, layers[-1][0].shape[1])

    logits, cache = forward(params, X)
    P = softmax(logits)
    masks = [cache[i][1] > 0 for i in range(L - 1)]
    hs = [cache[i][0] for i in range(L)]

    # first-order backward pass, keeping every delta
    deltas = [None] * L
    deltas[L - 1] = (P - T) / n
    for i in range(L - 1, 0, -1):
        deltas[i - 1] = (deltas[i] @ layers[i][0].T) * masks[i - 1]
    g = np.concatenate([np.concatenate([(hs[i].T @ deltas[i]).ravel(), deltas[i].sum(axis=0)])
                        for i in range(L)])
    _check_finite(g, "synthetic gradient")

    value, G = match_distance(g, target.data, distance)

    # adjoint of the backward pass
    adj_h = [np.zeros_like(h) for h in hs]
    pos = 0
    adj_delta = None
    for i, (W, b) in enumerate(layers):
        GW = G[pos:pos + W.size].reshape(W.shape)
        pos += W.size
        Gb = G[pos:pos + b.size]
        pos += b.size
        d = hs[i] @ GW + Gb
        if i > 0:
            d += (adj_delta * masks[i - 1]) @ W
        adj_delta = d
        adj_h[i] += deltas[i] @ GW.T

    # adjoint of (P - T) / n and of the forward pass
    dZ = _softmax_vjp(P, adj_delta / n)
    for i in range(L - 1, -1, -1):
        adj_h[i] += dZ @ layers[i][0].T
        if i > 0:
            dZ = adj_h[i] * masks[i - 1]
    dX = adj_h[0]
    dY = _softmax_vjp(T, -adj_delta / n) if soft else None
    _check_finite(dX, "input gradient")
    return value, dX, dY


def grad_of_gradmatch(params: ParamVec, X, Y, target: ParamVec, distance: str = "l2"):
    """``(dX, dY)`` of the gradient-matching distance; see :func:`gradmatch`."""
    _, dX, dY = gradmatch(params, X, Y, target, distance)
    return dX, dY

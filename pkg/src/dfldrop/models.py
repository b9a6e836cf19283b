"""Model specs, initialization, prediction and a scikit-learn style classifier."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import diffmath
from .diffmath import ParamVec
from .exceptions import PreconditionError, ShapeError
from .optim import SGD


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    n_features: int
    n_classes: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden layer sizes must be >= 1")
        if self.kind == "logreg" and self.hidden:
            raise ValueError("logreg takes no hidden layers")
        if self.kind == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden layer")

    @classmethod
    def logreg(cls, n_features, n_classes):
        return cls("logreg", n_features, n_classes)

    @classmethod
    def mlp(cls, n_features, n_classes, hidden=(128, 128)):
        return cls("mlp", n_features, n_classes, tuple(hidden))

    @property
    def shapes(self):
        return diffmath.layer_shapes(self.n_features, self.n_classes, self.hidden)

    @property
    def n_params(self) -> int:
        return sum(i * o + o for _, i, o in self.shapes)


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    params: ParamVec = field(repr=False)

    def __post_init__(self):
        if self.params.shapes != self.spec.shapes:
            raise ShapeError("parameter layout does not match the model spec")

    def with_params(self, params) -> "Model":
        if not isinstance(params, ParamVec):
            params = ParamVec(params, self.spec.shapes)
        return Model(self.spec, params)


def init_model(spec: ModelSpec, seed) -> Model:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for _, n_in, n_out in spec.shapes:
        a = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-a, a, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return Model(spec, ParamVec(np.concatenate(chunks), spec.shapes))


def zero_model(spec: ModelSpec) -> Model:
    return Model(spec, ParamVec(np.zeros(spec.n_params), spec.shapes))


def predict(model: Model, X) -> np.ndarray:
    return diffmath.predict_proba(model.params, X)


def predict_labels(model: Model, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    return np.argmax(predict(model, X), axis=1)


def correct_count(model: Model, X, Y) -> int:
    return int(np.sum(predict_labels(model, X) == np.asarray(Y)))


def accuracy(model: Model, X, Y) -> float:
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise PreconditionError("accuracy of an empty batch is undefined")
    if len(Y) != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} rows but {len(Y)} labels")
    return correct_count(model, X, Y) / X.shape[0]


def data_loss(model: Model, X, Y) -> float:
    return diffmath.cross_entropy(predict(model, X), Y)


def param_l2_distance(a: ParamVec, b: ParamVec) -> float:
    if not a.same_layout(b):
        raise ShapeError("parameter vectors have different layouts")
    return float(np.linalg.norm(a.data - b.data))


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression or ReLU MLP trained with SGD.

    Uses the same parameter layout and gradients as the federation code, so a
    fitted ``params_`` can be dropped straight into a client.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default=()
        Empty gives logistic regression.
    learning_rate, momentum : float
        SGD settings.
    max_iter : int
        Number of epochs.
    batch_size : int or None
        ``None`` means full batch.
    random_state : int or None
    """

    def __init__(self, hidden_layer_sizes=(), learning_rate=0.1, momentum=0.0,
                 max_iter=200, batch_size=None, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.max_iter = max_iter
        self.batch_size = batch_size
        self.random_state = random_state

    def _spec(self, n_features, n_classes):
        hidden = tuple(self.hidden_layer_sizes)
        return ModelSpec("mlp" if hidden else "logreg", n_features, n_classes, hidden)

    def fit(self, X, y, init_params=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        spec = self._spec(X.shape[1], len(self.classes_))
        rng = np.random.default_rng(self.random_state)
        model = init_model(spec, rng) if init_params is None else Model(spec, ParamVec(init_params, spec.shapes))
        opt = SGD(lr=self.learning_rate, momentum=self.momentum)
        theta = model.params.data
        n = X.shape[0]
        bs = n if self.batch_size is None else min(int(self.batch_size), n)
        for _ in range(int(self.max_iter)):
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                g = diffmath.grad_params(ParamVec(theta, spec.shapes), X[idx], y_idx[idx])
                theta = opt.step(theta, g.data)
        self.spec_ = spec
        self.params_ = ParamVec(theta, spec.shapes)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return diffmath.predict_proba(self.params_, X)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

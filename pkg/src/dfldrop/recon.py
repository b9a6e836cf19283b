"""Rebuilding a dropped client from what its peers last saw of it.

Three ways to produce a synthetic silo ``(X', Y')``:

``random_data``
    Uniform inputs in [0, 1]^d with uniform labels.
``model_inversion``
    Freeze the last known model and push inputs toward low loss under
    class-balanced labels, on the assumption that the model sat near a
    stationary point of its own data.
``gradient_inversion``
    Fit inputs and (soft) labels so that the gradient they induce matches the
    update observed between two broadcast snapshots.

Both inversions add a total-variation prior (image data only) and a domain
prior, run Adam over mini-batches, and clamp inputs to [0, 1] after every step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffmath
from .datahub import Dataset, Silo, split_train_val
from .diffmath import ParamVec
from .exceptions import CapabilityError, ConfigError, NumericDomainError, ShapeError
from .fedalgos import Algorithm, ClientState
from .models import Model
from .optim import Adam

DISTANCES = ("l2", "cosine")


class DegenerateTargetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReconConfig:
    n_points: int = 50
    batch_size: int = 16
    tv_weight: float = 0.01
    domain_weight: float = 0.1
    init: str = "uniform"  # or "normal": N(0.5, 0.1) clamped to [0, 1]
    mi_lr: float = 0.01
    mi_weight_decay: float = 0.01
    mi_epochs: int = 1000
    gi_lr: float = 0.05
    gi_epochs: int = 2000
    gi_distance: str = "both"  # "l2", "cosine" or "both"
    gi_joint_labels: bool = True
    gi_label_weight: float = 1.0
    gi_target_scale: float = 1.0
    random_pretrain_epochs: int = 10

    def __post_init__(self):
        weights = (self.tv_weight, self.domain_weight, self.mi_weight_decay, self.gi_label_weight)
        if any(w < 0 for w in weights):
            raise ConfigError("reconstruction weights must be >= 0")
        if self.mi_epochs < 1 or self.gi_epochs < 1 or self.n_points < 1 or self.batch_size < 1:
            raise ConfigError("epochs, n_points and batch_size must be >= 1")
        if self.init not in ("uniform", "normal"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.gi_distance not in (*DISTANCES, "both"):
            raise ConfigError(f"unknown distance {self.gi_distance!r}")
        if self.random_pretrain_epochs < 0:
            raise ConfigError("random_pretrain_epochs must be >= 0")


@dataclass(frozen=True, eq=False)
class SyntheticSilo:
    X: np.ndarray
    y: np.ndarray
    origin: str
    soft_labels: np.ndarray | None = None
    trace: tuple[float, ...] = ()
    info: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]


# --------------------------------------------------------------------------
# priors


def domain_prior(X) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(np.sum(np.maximum(X - 1.0, 0.0) + np.maximum(-X, 0.0)))


def domain_prior_grad(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (X > 1.0).astype(np.float64) - (X < 0.0).astype(np.float64)


def _as_images(X, grid_shape):
    X = np.asarray(X, dtype=np.float64)
    r, c = grid_shape
    if X.ndim != 2 or X.shape[1] != r * c:
        raise ShapeError(f"{X.shape[-1]} features cannot be laid out on a {r}x{c} grid")
    return X.reshape(-1, r, c)


def total_variation(X, grid_shape) -> float:
    """Anisotropic TV per image, averaged over the batch; 0 without a grid."""
    if grid_shape is None:
        return 0.0
    imgs = _as_images(X, grid_shape)
    tv = np.abs(np.diff(imgs, axis=2)).sum(axis=(1, 2)) + np.abs(np.diff(imgs, axis=1)).sum(axis=(1, 2))
    return float(tv.mean())


def total_variation_grad(X, grid_shape) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if grid_shape is None:
        return np.zeros_like(X)
    imgs = _as_images(X, grid_shape)
    g = np.zeros_like(imgs)
    sh = np.sign(np.diff(imgs, axis=2))
    g[:, :, 1:] += sh
    g[:, :, :-1] -= sh
    sv = np.sign(np.diff(imgs, axis=1))
    g[:, 1:, :] += sv
    g[:, :-1, :] -= sv
    return g.reshape(X.shape) / imgs.shape[0]


def _prior(X, grid_shape, cfg: ReconConfig):
    value = cfg.domain_weight * domain_prior(X)
    grad = cfg.domain_weight * domain_prior_grad(X)
    if grid_shape is not None and cfg.tv_weight:
        value += cfg.tv_weight * total_variation(X, grid_shape)
        grad = grad + cfg.tv_weight * total_variation_grad(X, grid_shape)
    return value, grad


# --------------------------------------------------------------------------
# helpers


def balanced_labels(n: int, n_classes: int) -> np.ndarray:
    """``n // C`` per class, with the remainder going to the lowest class ids."""
    base, extra = divmod(n, n_classes)
    return np.concatenate([np.full(base + (c < extra), c, dtype=np.int64) for c in range(n_classes)])


def init_inputs(n: int, d: int, cfg: ReconConfig, rng) -> np.ndarray:
    if cfg.init == "normal":
        return np.clip(rng.normal(0.5, 0.1, size=(n, d)), 0.0, 1.0)
    return rng.uniform(0.0, 1.0, size=(n, d))


def _batches(n: int, bs: int, rng):
    order = rng.permutation(n)
    return [order[s:s + bs] for s in range(0, n, bs)]


def _check_model(model: Model):
    for kind, _, _ in model.params.shapes:
        if kind != "dense":
            raise CapabilityError(f"reconstruction does not support layer kind {kind!r}")


def random_data(d: int, n_classes: int, n: int = 50, seed=None) -> SyntheticSilo:
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(n, d))
    y = rng.integers(0, n_classes, size=n)
    return SyntheticSilo(X, y, "random")


def pseudo_gradient(snap_prev: ParamVec, snap_last: ParamVec, lr_nominal: float) -> ParamVec:
    """Observed update between two snapshots, rescaled to gradient units."""
    if not snap_prev.same_layout(snap_last):
        raise ShapeError("snapshots have different layouts")
    if lr_nominal <= 0:
        raise ValueError("nominal learning rate must be positive")
    g = (snap_prev.data - snap_last.data) / lr_nominal
    if not np.any(g):
        warnings.warn("identical snapshots give a zero gradient target", DegenerateTargetWarning,
                      stacklevel=2)
    return snap_prev.with_data(g)


def stationarity(model: Model, X, y) -> float:
    return float(np.linalg.norm(diffmath.grad_params(model.params, X, y).data))


# --------------------------------------------------------------------------
# model inversion


def model_inversion(model: Model, cfg: ReconConfig = ReconConfig(), seed=None, grid_shape=None,
                    init_X=None) -> SyntheticSilo:
    _check_model(model)
    rng = np.random.default_rng(seed)
    spec = model.spec
    n = cfg.n_points
    y = balanced_labels(n, spec.n_classes)
    X = init_inputs(n, spec.n_features, cfg, rng) if init_X is None else np.array(init_X, dtype=np.float64)
    opt = Adam(lr=cfg.mi_lr, weight_decay=cfg.mi_weight_decay)
    initial_loss = diffmath.cross_entropy(diffmath.predict_proba(model.params, X), y)
    trace = []
    for _ in range(cfg.mi_epochs):
        total = 0.0
        batches = _batches(n, cfg.batch_size, rng)
        for idx in batches:
            loss, _, dXb = diffmath.loss_and_grads(model.params, X[idx], y[idx])
            pv, pg = _prior(X[idx], grid_shape, cfg)
            G = np.zeros_like(X)
            G[idx] = dXb + pg
            X = np.clip(opt.step(X, G), 0.0, 1.0)
            total += loss + pv
        value = total / len(batches)
        if not np.isfinite(value):
            raise NumericDomainError(f"model inversion diverged at epoch {len(trace) + 1}")
        trace.append(value)
    final_loss = diffmath.cross_entropy(diffmath.predict_proba(model.params, X), y)
    info = {"initial_loss": initial_loss, "final_loss": final_loss,
            "grad_norm": stationarity(model, X, y)}
    return SyntheticSilo(X, y, "model-inversion", trace=tuple(trace), info=info)


# --------------------------------------------------------------------------
# gradient inversion


def matching_distance(model: Model, X, Y, target: ParamVec, distance: str = "l2") -> float:
    """Distance between the gradient induced by ``(X, Y)`` and ``target``.

    ``Y`` may be hard labels or a matrix of label logits.
    """
    Y = np.asarray(Y)
    labels = diffmath.softmax(Y) if Y.ndim == 2 else Y
    g = diffmath.grad_params(model.params, X, labels)
    return diffmath.match_distance(g.data, target.data, distance)[0]


def _label_term(params: ParamVec, X, Yl):
    """Mean squared distance between predictions and soft labels, with gradients."""
    P = diffmath.predict_proba(params, X)
    S = diffmath.softmax(Yl)
    diff = P - S
    n = X.shape[0]
    _, dX = diffmath.vjp_probs(params, X, 2.0 * diff / n)
    dS = -2.0 * diff / n
    dYl = S * (dS - np.sum(dS * S, axis=1, keepdims=True))
    return float(np.sum(diff * diff) / n), dX, dYl


def _invert_once(model: Model, target: ParamVec, cfg: ReconConfig, distance: str, seed, grid_shape,
                 init_X, init_Y):
    rng = np.random.default_rng(seed)
    spec = model.spec
    n = cfg.n_points
    X = init_inputs(n, spec.n_features, cfg, rng) if init_X is None else np.array(init_X, dtype=np.float64)
    if cfg.gi_joint_labels:
        Y = rng.normal(0.0, 1.0, size=(n, spec.n_classes)) if init_Y is None else np.array(init_Y, dtype=np.float64)
    else:
        Y = rng.integers(0, spec.n_classes, size=n) if init_Y is None else np.asarray(init_Y, dtype=np.int64)
    opt_x = Adam(lr=cfg.gi_lr)
    opt_y = Adam(lr=cfg.gi_lr)
    initial = matching_distance(model, X, Y, target, distance)
    trace = []
    for _ in range(cfg.gi_epochs):
        total = 0.0
        batches = _batches(n, cfg.batch_size, rng)
        for idx in batches:
            value, dXb, dYb = diffmath.gradmatch(model.params, X[idx], Y[idx], target, distance)
            pv, pg = _prior(X[idx], grid_shape, cfg)
            dXb = dXb + pg
            value += pv
            if cfg.gi_joint_labels and cfg.gi_label_weight:
                lv, ldX, ldY = _label_term(model.params, X[idx], Y[idx])
                value += cfg.gi_label_weight * lv
                dXb = dXb + cfg.gi_label_weight * ldX
                dYb = dYb + cfg.gi_label_weight * ldY
            GX = np.zeros_like(X)
            GX[idx] = dXb
            X = np.clip(opt_x.step(X, GX), 0.0, 1.0)
            if cfg.gi_joint_labels:
                GY = np.zeros_like(Y)
                GY[idx] = dYb
                Y = opt_y.step(Y, GY)
            total += value
        value = total / len(batches)
        if not np.isfinite(value):
            raise NumericDomainError(f"gradient inversion ({distance}) diverged at epoch {len(trace) + 1}")
        trace.append(value)
    final = matching_distance(model, X, Y, target, distance)
    if cfg.gi_joint_labels:
        soft = diffmath.softmax(Y)
        labels = np.argmax(soft, axis=1)
    else:
        soft, labels = None, Y
    info = {"distance": distance, "initial_distance": initial, "final_distance": final,
            "relative_distance": final / initial if initial > 0 else 0.0}
    return SyntheticSilo(X, labels, "gradient-inversion", soft_labels=soft, trace=tuple(trace), info=info)


def gradient_inversion(model: Model, target: ParamVec, cfg: ReconConfig = ReconConfig(), seed=None,
                       grid_shape=None, init_X=None, init_Y=None) -> SyntheticSilo:
    """Fit synthetic data whose induced gradient matches ``target``.

    With ``cfg.gi_distance == "both"`` the L2 and cosine variants are run from
    the same initialization and the one whose matching distance shrank more
    (relative to its own starting value) is returned; the other variant's
    summary is kept under ``info["alternatives"]``. A zero target leaves only
    the L2 variant.
    """
    _check_model(model)
    if not target.same_layout(model.params):
        raise ShapeError("target gradient layout does not match the model")
    target = target.with_data(target.data * cfg.gi_target_scale)
    kinds = DISTANCES if cfg.gi_distance == "both" else (cfg.gi_distance,)
    if not np.any(target.data):
        if kinds == ("cosine",):
            raise ConfigError("cosine distance is undefined for a zero gradient target")
        kinds = ("l2",)
    run_seed = int(np.random.default_rng(seed).integers(2**63))  # same init for every variant
    results = [_invert_once(model, target, cfg, k, run_seed, grid_shape, init_X, init_Y) for k in kinds]
    best = min(results, key=lambda s: s.info["relative_distance"])
    if len(results) > 1:
        others = {s.info["distance"]: dict(s.info) for s in results if s is not best}
        best = replace(best, info={**best.info, "alternatives": others})
    return best


# --------------------------------------------------------------------------
# virtual client


def synthetic_to_silo(owner: int, syn: SyntheticSilo, n_classes: int, rng, grid_shape=None) -> Silo:
    ds = Dataset(np.asarray(syn.X, dtype=np.float64), np.asarray(syn.y, dtype=np.int64), n_classes,
                 grid_shape=grid_shape)
    tr, va = split_train_val(len(ds), rng)
    return Silo(owner, ds.subset(tr), ds.subset(va), np.arange(len(ds)), {"scheme": syn.origin})


def pretrain(model: Model, silo: Silo, algo: Algorithm, epochs: int, rng, batch_size: int = 16) -> Model:
    """Plain data-loss training with the algorithm's optimizer settings."""
    opt = algo.new_optimizer()
    theta = model.params.data
    X, y = silo.train.X, silo.train.y
    n = len(y)
    if n == 0:
        return model
    for _ in range(epochs):
        for idx in _batches(n, batch_size, rng):
            g = diffmath.grad_params(model.params.with_data(theta), X[idx], y[idx])
            theta = opt.step(theta, g.data)
    return model.with_params(theta)


def make_virtual_client(client_id: int, theta_last: Model, syn: SyntheticSilo, algo: Algorithm,
                        rng=None, *, pretrain_epochs: int = 0, grid_shape=None) -> ClientState:
    """A fresh participant holding ``theta_last`` and the synthetic data."""
    if len(syn) == 0:
        raise ShapeError("cannot build a virtual client from an empty silo")
    rng = np.random.default_rng(rng)
    silo = synthetic_to_silo(client_id, syn, theta_last.spec.n_classes, rng, grid_shape)
    model = theta_last
    if pretrain_epochs:
        model = pretrain(model, silo, algo, pretrain_epochs, rng)
    return ClientState(client_id, theta_last.spec, model.params, algo.new_optimizer(), silo, virtual=True)

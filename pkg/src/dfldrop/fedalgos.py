"""Client state, communication graph and the three local-training policies.

* DJAM: data loss plus squared-L2 pulls toward the client's own model at the
  start of its local phase and toward every cached neighbor model.
* DFedAvgM: average own and cached neighbor models, then SGD with momentum on
  the data loss alone.
* FSR: data loss plus function-space pulls, measured on fresh uniform probe
  points as the mean squared difference of class probabilities.

The policies mutate a :class:`ClientState` in place and return it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath
from .datahub import Silo
from .diffmath import ParamVec
from .exceptions import DeadClientError, PreconditionError, ProtocolError, ShapeError
from .models import ModelSpec
from .optim import SGD

ALGORITHMS = ("djam", "fsr", "dfedavgm")


@dataclass
class CommGraph:
    weights: np.ndarray

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ShapeError("communication graph must be a square matrix")
        if np.any(W < 0) or np.any(np.diag(W) != 0):
            raise ValueError("graph weights must be nonnegative with a zero diagonal")
        self.weights = W

    @classmethod
    def fully_connected(cls, m: int) -> "CommGraph":
        return cls(np.ones((m, m)) - np.eye(m))

    @property
    def m(self) -> int:
        return self.weights.shape[0]

    def row(self, i: int) -> dict[int, float]:
        return {int(j): float(w) for j, w in enumerate(self.weights[i]) if w > 0}

    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.m) for j in range(i + 1, self.m)
                if self.weights[i, j] > 0 or self.weights[j, i] > 0]

    def without(self, i: int) -> "CommGraph":
        W = self.weights.copy()
        W[i, :] = 0.0
        W[:, i] = 0.0
        return CommGraph(W)


@dataclass(eq=False)
class ClientState:
    """One participant. The silo is only reachable while the client is alive."""

    id: int
    spec: ModelSpec
    params: ParamVec
    opt: SGD
    _silo: Silo = field(repr=False)
    prev_snapshot: ParamVec | None = None
    neighbor_cache: dict[int, ParamVec] = field(default_factory=dict)
    alive: bool = True
    virtual: bool = False

    @property
    def silo(self) -> Silo:
        if not self.alive:
            raise DeadClientError(f"client {self.id} has dropped out; its data is gone")
        return self._silo

    def kill(self) -> None:
        self.alive = False
        self._silo = None


def draw_batch(state: ClientState, rng, batch_size: int | None):
    train = state.silo.train
    n = len(train)
    if n == 0:
        raise PreconditionError(f"client {state.id} has an empty training set")
    if batch_size is None or batch_size >= n:
        return train.X, train.y
    idx = np.sort(rng.choice(n, size=batch_size, replace=False))
    return train.X[idx], train.y[idx]


def _check_batch(batch):
    X, y = batch
    if len(y) == 0:
        raise PreconditionError("local step needs a nonempty batch")
    return X, y


def _neighbors(state: ClientState, graph_row: dict[int, float]):
    return [(j, w, state.neighbor_cache[j]) for j, w in sorted(graph_row.items())
            if w > 0 and j in state.neighbor_cache]


# --------------------------------------------------------------------------
# objectives (value and gradient at an arbitrary theta)


def djam_objective(state: ClientState, theta: np.ndarray, graph_row, batch):
    X, y = _check_batch(batch)
    p = state.params.with_data(theta)
    loss, g, _ = diffmath.loss_and_grads(p, X, y)
    prev = state.prev_snapshot.data if state.prev_snapshot is not None else theta
    d = theta - prev
    loss += float(d @ d)
    g = g + 2.0 * d
    for _, w, other in _neighbors(state, graph_row):
        d = theta - other.data
        loss += 0.5 * w * float(d @ d)
        g = g + w * d
    return loss, g


def function_discrepancy(a: ParamVec, b: ParamVec, probes) -> float:
    """Probe-mean of the squared L2 distance between the two models' probabilities."""
    diff = diffmath.predict_proba(a, probes) - diffmath.predict_proba(b, probes)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def fsr_objective(state: ClientState, theta: np.ndarray, graph_row, batch, probes, *,
                  omega: float, lam: float, root: bool = False):
    X, y = _check_batch(batch)
    probes = np.asarray(probes, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[1] != state.spec.n_features:
        raise ShapeError(f"probes must have {state.spec.n_features} columns")
    p = state.params.with_data(theta)
    loss, g, _ = diffmath.loss_and_grads(p, X, y)
    P = diffmath.predict_proba(p, probes)
    n = probes.shape[0]
    terms = []
    prev = state.prev_snapshot if state.prev_snapshot is not None else p
    terms.append(((1.0 - omega) / omega, prev))
    neigh = _neighbors(state, graph_row)
    for _, w, other in neigh:
        terms.append((lam * w / len(neigh), other))
    dP = np.zeros_like(P)
    for coef, other in terms:
        diff = P - diffmath.predict_proba(other, probes)
        D = float(np.mean(np.sum(diff * diff, axis=1)))
        if root:
            r = np.sqrt(D)
            loss += coef * r
            dP += coef * (2.0 * diff / n) / (2.0 * max(r, 1e-12))
        else:
            loss += coef * D
            dP += coef * 2.0 * diff / n
    gp, _ = diffmath.vjp_probs(p, probes, dP)
    return loss, g + gp


# --------------------------------------------------------------------------
# steps


def djam_local_step(state: ClientState, graph_row, batch) -> ClientState:
    _, g = djam_objective(state, state.params.data, graph_row, batch)
    state.params = state.params.with_data(state.opt.step(state.params.data, g))
    return state


def fsr_local_step(state: ClientState, graph_row, batch, probes, *, omega=0.01, lam=50.0,
                   root=False) -> ClientState:
    _, g = fsr_objective(state, state.params.data, graph_row, batch, probes,
                         omega=omega, lam=lam, root=root)
    state.params = state.params.with_data(state.opt.step(state.params.data, g))
    return state


def dfedavgm_mix(state: ClientState, graph_row) -> ClientState:
    """Uniform average of the client's own model and its cached neighbor models."""
    stack = [state.params.data] + [other.data for _, _, other in _neighbors(state, graph_row)]
    state.params = state.params.with_data(np.mean(stack, axis=0))
    return state


def dfedavgm_local_step(state: ClientState, batch) -> ClientState:
    X, y = _check_batch(batch)
    g = diffmath.grad_params(state.params, X, y)
    state.params = state.params.with_data(state.opt.step(state.params.data, g.data))
    return state


def exchange(a: ClientState, b: ClientState, graph: CommGraph):
    """Swap current models; each side caches the other's (immutable) parameters."""
    if graph.weights[a.id, b.id] <= 0 and graph.weights[b.id, a.id] <= 0:
        raise ProtocolError(f"clients {a.id} and {b.id} are not connected")
    a.neighbor_cache[b.id] = b.params
    b.neighbor_cache[a.id] = a.params
    return a, b


# --------------------------------------------------------------------------
# algorithm policy objects


@dataclass(frozen=True)
class Algorithm:
    """Hyperparameters plus dispatch for one of the DFL algorithms."""

    name: str
    lr: float
    momentum: float = 0.0
    omega: float = 0.01
    lam: float = 50.0
    probes: int = 500
    fsr_root: bool = False
    batch_size: int | None = None

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.omega < 1.0:
            raise ValueError("omega must lie in (0, 1)")
        if self.probes < 1:
            raise ValueError("probe count must be >= 1")

    @classmethod
    def default(cls, name: str, **overrides) -> "Algorithm":
        base = {"djam": dict(lr=0.1), "fsr": dict(lr=0.1, omega=0.01, lam=50.0, probes=500),
                "dfedavgm": dict(lr=0.01, momentum=0.9)}[name]
        return cls(name, **{**base, **overrides})

    def new_optimizer(self) -> SGD:
        return SGD(lr=self.lr, momentum=self.momentum)

    def begin_local_phase(self, state: ClientState, graph_row) -> None:
        if self.name == "dfedavgm":
            dfedavgm_mix(state, graph_row)
        state.prev_snapshot = state.params

    def local_step(self, state: ClientState, graph_row, rng) -> None:
        batch = draw_batch(state, rng, self.batch_size)
        if self.name == "dfedavgm":
            dfedavgm_local_step(state, batch)
        elif self.name == "djam":
            djam_local_step(state, graph_row, batch)
        else:
            probes = rng.uniform(0.0, 1.0, size=(self.probes, state.spec.n_features))
            fsr_local_step(state, graph_row, batch, probes, omega=self.omega, lam=self.lam,
                           root=self.fsr_root)

"""Asynchronous round loop with persistent dropout and the mitigation strategies.

Every round, each live client runs a random number of local steps; then ``k``
distinct connected pairs swap models. After the configured dropout round one
client disappears for good and the selected strategy decides what the rest of
the federation does about it.
"""
from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import recon
from .datahub import Dataset, FoldPlan, Silo, partition
from .diffmath import ParamVec
from .exceptions import (ConfigError, ProtocolError, ReconstructionUnavailable, StateError)
from .fedalgos import Algorithm, ClientState, CommGraph, exchange
from .models import Model, ModelSpec, correct_count, init_model, predict
from .recon import ReconConfig, SyntheticSilo
from .seeding import SeedPlan

log = logging.getLogger(__name__)

STRATEGIES = ("reference", "no-action", "drop", "random", "gradient-inversion", "model-inversion")
ADAPTIVE = ("random", "gradient-inversion", "model-inversion")


@dataclass(frozen=True)
class FederationConfig:
    algorithm: Algorithm = field(default_factory=lambda: Algorithm.default("dfedavgm"))
    strategy: str = "reference"
    partition: str = "iid"
    n_clients: int = 3
    rounds: int = 200
    pairs: int = 2
    local_steps: tuple[int, int] = (5, 10)
    dropout_round: int = 5
    dropout_client: int | None = None
    early_stopping: bool = True
    patience: int = 10
    hidden: tuple[int, ...] = ()
    silo_cap: int | None = 200
    recon: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.n_clients < 2:
            raise ConfigError("need at least two clients")
        if self.pairs < 1:
            raise ConfigError("pairs per round must be >= 1")
        if not 0 <= self.dropout_round < self.rounds:
            raise ConfigError("dropout round must come before the last round")
        lo, hi = self.local_steps
        if not 1 <= lo <= hi:
            raise ConfigError("local step range must satisfy 1 <= low <= high")
        if self.dropout_client is not None and not 0 <= self.dropout_client < self.n_clients:
            raise ConfigError("dropout client id out of range")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def model_spec(self, n_features: int, n_classes: int) -> ModelSpec:
        if self.hidden:
            return ModelSpec("mlp", n_features, n_classes, tuple(self.hidden))
        return ModelSpec("logreg", n_features, n_classes)


@dataclass
class RoundLog:
    round: int
    accuracies: dict[int, float]
    correct: dict[int, int]
    distances: dict[tuple[int, int], float]
    pairs: list[tuple[int, int]]
    skipped_pairs: list[tuple[int, int]]
    local_steps: dict[int, int]
    events: list[str] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracies.values())))

    @property
    def similarity(self) -> float:
        return float(np.mean(list(self.distances.values()))) if self.distances else 0.0

    @property
    def active(self) -> int:
        return len(self.accuracies)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "accuracies": {str(k): v for k, v in self.accuracies.items()},
            "correct": {str(k): v for k, v in self.correct.items()},
            "distances": {f"{i}-{j}": v for (i, j), v in self.distances.items()},
            "mean_accuracy": self.mean_accuracy,
            "similarity": self.similarity,
            "pairs": [list(p) for p in self.pairs],
            "skipped_pairs": [list(p) for p in self.skipped_pairs],
            "local_steps": {str(k): v for k, v in self.local_steps.items()},
            "events": list(self.events),
        }


class FederationRun:
    """Mutable state of one simulated federation."""

    def __init__(self, cfg: FederationConfig, silos: list[Silo], test: Dataset, seeds: SeedPlan,
                 n_classes: int | None = None, grid_shape=None):
        if len(silos) != cfg.n_clients:
            raise ConfigError(f"{len(silos)} silos for {cfg.n_clients} clients")
        self.cfg = cfg
        self.algo = cfg.algorithm
        self.test = test
        self.seeds = seeds
        self.grid_shape = grid_shape if grid_shape is not None else test.grid_shape
        n_classes = n_classes or test.n_classes
        self.spec = cfg.model_spec(test.n_features, n_classes)
        self.graph = CommGraph.fully_connected(cfg.n_clients)
        init_seqs = seeds.sequence("init").spawn(cfg.n_clients)
        self.clients = [
            ClientState(i, self.spec, init_model(self.spec, init_seqs[i]).params, self.algo.new_optimizer(), silo)
            for i, silo in enumerate(silos)
        ]
        self.rng = seeds.rng("rounds")
        self.history = {i: deque(maxlen=2) for i in range(cfg.n_clients)}
        self.logs: list[RoundLog] = []
        self.round = 0
        self.dead: int | None = None
        self.retired: dict[int, ClientState] = {}
        self.synthetic: SyntheticSilo | None = None
        self.dead_snapshots: tuple[ParamVec, ...] = ()
        self.finished = False
        self._pending_events: list[str] = []

    # -- helpers -----------------------------------------------------------

    def event(self, msg: str) -> None:
        # events raised between rounds belong to the round that just finished
        (self.logs[-1].events if self.logs else self._pending_events).append(msg)

    def _record_broadcast(self, client: ClientState) -> None:
        hist = self.history[client.id]
        if not hist or hist[-1] is not client.params:  # resending the same model is one broadcast
            hist.append(client.params)

    def initial_broadcast(self) -> None:
        for c in self.clients:
            self._record_broadcast(c)
        for c in self.clients:
            for j in self.graph.row(c.id):
                c.neighbor_cache[j] = self.clients[j].params

    def graph_row(self, i: int) -> dict[int, float]:
        return self.graph.row(i)

    def tracked_models(self) -> dict[int, ParamVec]:
        out = {}
        for c in self.clients:
            if c.alive:
                out[c.id] = c.params
            elif self.cfg.strategy == "no-action":
                # the federation still carries the frozen copy
                out[c.id] = self.history[c.id][-1]
        return out


# --------------------------------------------------------------------------
# round mechanics


def sample_local_steps(rng, low: int, high: int) -> int:
    return int(rng.integers(low, high + 1))


def select_pairs(graph: CommGraph, k: int, rng) -> list[tuple[int, int]]:
    edges = graph.edges()
    if not edges:
        raise ProtocolError("no eligible edges left in the communication graph")
    take = min(k, len(edges))
    chosen = rng.choice(len(edges), size=take, replace=False)
    return [edges[int(i)] for i in chosen]


def evaluate(run: FederationRun) -> tuple[dict, dict, dict]:
    models = run.tracked_models()
    correct, acc = {}, {}
    n = len(run.test)
    for i, p in models.items():
        correct[i] = correct_count(Model(run.spec, p), run.test.X, run.test.y)
        acc[i] = correct[i] / n
    distances = {(i, j): float(np.linalg.norm(models[i].data - models[j].data))
                 for i, j in itertools.combinations(sorted(models), 2)}
    return acc, correct, distances


def run_round(run: FederationRun) -> FederationRun:
    if run.finished:
        raise StateError("run already finished")
    if run.round == 0 and not any(run.history.values()):
        run.initial_broadcast()
    run.round += 1
    lo, hi = run.cfg.local_steps
    steps = {c.id: (sample_local_steps(run.rng, lo, hi) if c.alive else 0) for c in run.clients}
    for c in run.clients:
        if not c.alive:
            continue
        row = run.graph_row(c.id)
        run.algo.begin_local_phase(c, row)
        for _ in range(steps[c.id]):
            run.algo.local_step(c, row, run.rng)
    pairs = select_pairs(run.graph, run.cfg.pairs, run.rng)
    skipped = []
    for i, j in pairs:
        a, b = run.clients[i], run.clients[j]
        if not (a.alive and b.alive):
            skipped.append((i, j))
            continue
        exchange(a, b, run.graph)
        run._record_broadcast(a)
        run._record_broadcast(b)
    acc, correct, dist = evaluate(run)
    run.logs.append(RoundLog(run.round, acc, correct, dist, pairs, skipped, steps, run._pending_events))
    run._pending_events = []
    return run


def inject_dropout(run: FederationRun, client: int | None = None) -> FederationRun:
    if run.cfg.strategy == "reference":
        raise StateError("the reference strategy never drops a client")
    if run.dead is not None:
        raise StateError(f"client {run.dead} already dropped")
    if client is None:
        client = run.cfg.dropout_client
    if client is None:
        client = int(run.seeds.rng("dropout").integers(run.cfg.n_clients))
    run.dead = client
    run.dead_snapshots = tuple(run.history[client])
    run.clients[client].kill()
    run.event(f"dropout:{client}")
    log.debug("round %d: client %d dropped (%s)", run.round, client, run.cfg.strategy)
    return apply_strategy(run, client)


def apply_strategy(run: FederationRun, dead: int) -> FederationRun:
    strategy = run.cfg.strategy
    if strategy == "no-action":
        return run
    if strategy == "drop":
        run.graph = run.graph.without(dead)
        for c in run.clients:
            c.neighbor_cache.pop(dead, None)
        run.event(f"removed:{dead}")
        return run
    snaps = run.dead_snapshots
    if not snaps:
        raise ReconstructionUnavailable(f"no broadcast of client {dead} was ever observed")
    theta_last = Model(run.spec, snaps[-1])
    rcfg = run.cfg.recon
    rng = run.seeds.rng("recon")
    if strategy == "random":
        syn = recon.random_data(run.spec.n_features, run.spec.n_classes, rcfg.n_points, rng)
        pre = rcfg.random_pretrain_epochs
    elif strategy == "model-inversion":
        syn = recon.model_inversion(theta_last, rcfg, rng, run.grid_shape)
        pre = 0
    else:
        if len(snaps) < 2:
            raise ReconstructionUnavailable(f"gradient inversion needs two snapshots of client {dead}")
        target = recon.pseudo_gradient(snaps[0], snaps[1], run.algo.lr)
        syn = recon.gradient_inversion(theta_last, target, rcfg, rng, run.grid_shape)
        pre = 0
    virtual = recon.make_virtual_client(dead, theta_last, syn, run.algo, rng, pretrain_epochs=pre,
                                        grid_shape=run.grid_shape)
    for j in run.graph.row(dead):
        if run.clients[j].alive:
            virtual.neighbor_cache[j] = run.clients[j].params
    run.retired[dead] = run.clients[dead]
    run.clients[dead] = virtual
    run.synthetic = syn
    run.event(f"virtual:{dead}")
    return run


def early_stop(logs: list[RoundLog], patience: int = 10) -> bool:
    """True once every tracked client scored identically for ``patience`` rounds."""
    if len(logs) < patience:
        return False
    return all(len(set(entry.correct.values())) == 1 for entry in logs[-patience:])


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    strategy: str
    logs: list[RoundLog]
    dead: int | None
    synthetic: SyntheticSilo | None
    dead_snapshots: tuple[ParamVec, ...]
    final_params: dict[int, ParamVec]
    spec: ModelSpec

    @property
    def final_accuracy(self) -> float:
        return self.logs[-1].mean_accuracy


def run_experiment(cfg: FederationConfig, silos: list[Silo], test: Dataset, seeds: SeedPlan,
                   n_classes: int | None = None, grid_shape=None) -> ExperimentResult:
    run = FederationRun(cfg, silos, test, seeds, n_classes, grid_shape)
    run.initial_broadcast()
    while run.round < cfg.rounds:
        run_round(run)
        if run.round == cfg.dropout_round and cfg.strategy != "reference":
            inject_dropout(run)
        if cfg.early_stopping and early_stop(run.logs, cfg.patience):
            log.debug("early stop at round %d", run.round)
            break
    run.finished = True
    return ExperimentResult(cfg.strategy, run.logs, run.dead, run.synthetic, run.dead_snapshots,
                            run.tracked_models(), run.spec)


def run_fold(cfg: FederationConfig, ds: Dataset, plan: FoldPlan, fold: int, master_seed: int) -> ExperimentResult:
    """Train on every fold but ``fold``; evaluate on ``fold``."""
    seeds = SeedPlan(master_seed, fold)
    train = ds.subset(plan.train_indices(fold))
    test = ds.subset(plan.test_indices(fold))
    silos = partition(train, cfg.partition, cfg.n_clients, seed=seeds.rng("partition"), cap=cfg.silo_cap)
    return run_experiment(cfg, silos, test, seeds, ds.n_classes, ds.grid_shape)


class DropoutFederation(BaseEstimator):
    """Estimator front-end: ``fit`` simulates a whole federation on ``(X, y)``.

    ``X`` should already lie in [0, 1] (see ``datahub.minmax_normalize``).
    Per-round accuracies need a held-out set, passed as ``eval_set=(X, y)``;
    without one the training data itself is used. ``predict_proba`` averages
    the tracked client models.
    """

    def __init__(self, algorithm="dfedavgm", strategy="reference", partition="iid", n_clients=3,
                 rounds=200, pairs=2, dropout_round=5, hidden_layer_sizes=(), early_stopping=True,
                 batch_size=None, random_state=0):
        self.algorithm = algorithm
        self.strategy = strategy
        self.partition = partition
        self.n_clients = n_clients
        self.rounds = rounds
        self.pairs = pairs
        self.dropout_round = dropout_round
        self.hidden_layer_sizes = hidden_layer_sizes
        self.early_stopping = early_stopping
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        C = len(self.classes_)
        train = Dataset(X, np.searchsorted(self.classes_, y), C)
        if eval_set is None:
            test = train
        else:
            Xt, yt = check_X_y(*eval_set, dtype=np.float64)
            test = Dataset(Xt, np.searchsorted(self.classes_, yt), C)
        cfg = FederationConfig(
            algorithm=Algorithm.default(self.algorithm, batch_size=self.batch_size),
            strategy=self.strategy, partition=self.partition, n_clients=self.n_clients,
            rounds=self.rounds, pairs=self.pairs, dropout_round=self.dropout_round,
            hidden=tuple(self.hidden_layer_sizes), early_stopping=self.early_stopping)
        seeds = SeedPlan(int(self.random_state or 0))
        silos = partition(train, cfg.partition, cfg.n_clients, seed=seeds.rng("partition"))
        self.result_ = run_experiment(cfg, silos, test, seeds, C)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        spec = self.result_.spec
        return np.mean([predict(Model(spec, p), X) for p in self.result_.final_params.values()], axis=0)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def score(self, X, y):
        """Mean accuracy of the individual tracked client models."""
        check_is_fitted(self, "result_")
        X, y = check_X_y(X, y, dtype=np.float64)
        spec = self.result_.spec
        accs = [np.mean(self.classes_[np.argmax(predict(Model(spec, p), X), axis=1)] == y)
                for p in self.result_.final_params.values()]
        return float(np.mean(accs))

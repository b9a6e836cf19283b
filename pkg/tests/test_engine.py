from pathlib import Path

import numpy as np
import pytest
from sklearn.base import clone

from dfldrop.datahub import kfold_plan, load_csv, minmax_normalize, partition
from dfldrop.engine import (DropoutFederation, FederationConfig, FederationRun, RoundLog,
                            early_stop, inject_dropout, run_experiment, run_fold, run_round, select_pairs)
from dfldrop.exceptions import (ConfigError, DeadClientError, ProtocolError, ReconstructionUnavailable,
                                StateError)
from dfldrop.fedalgos import Algorithm, CommGraph
from dfldrop.recon import ReconConfig
from dfldrop.seeding import SeedPlan

DATA = Path(__file__).resolve().parents[1] / "data"
FAST_RECON = ReconConfig(n_points=12, mi_epochs=5, gi_epochs=5, random_pretrain_epochs=1)


@pytest.fixture(scope="module")
def iris():
    return minmax_normalize(load_csv(DATA / "iris.csv"))


def _setup(ds, strategy="reference", rounds=12, algo="dfedavgm", scheme="iid", **kw):
    cfg = FederationConfig(algorithm=Algorithm.default(algo), strategy=strategy, partition=scheme,
                           rounds=rounds, recon=FAST_RECON, early_stopping=False, **kw)
    plan = kfold_plan(ds, 10, 0)
    seeds = SeedPlan(3, 0)
    train, test = ds.subset(plan.train_indices(0)), ds.subset(plan.test_indices(0))
    silos = partition(train, scheme, 3, seed=seeds.rng("partition"))
    return cfg, silos, test, seeds


def _run_until(ds, strategy, upto, **kw):
    cfg, silos, test, seeds = _setup(ds, strategy, **kw)
    run = FederationRun(cfg, silos, test, seeds)
    run.initial_broadcast()
    while run.round < upto:
        run_round(run)
        if run.round == cfg.dropout_round and strategy != "reference":
            inject_dropout(run)
    return run


def test_local_steps_and_pairs(iris):
    res = run_experiment(*_setup(iris, rounds=30))
    for log in res.logs:
        assert all(5 <= e <= 10 for e in log.local_steps.values())
        assert len(log.pairs) == 2 and len(set(log.pairs)) == 2
        assert all(i < j for i, j in log.pairs)
    seen = {e for log in res.logs for e in log.local_steps.values()}
    assert seen == set(range(5, 11))


def test_rerun_is_bitwise_identical(iris):
    a = run_experiment(*_setup(iris, "model-inversion", rounds=15))
    b = run_experiment(*_setup(iris, "model-inversion", rounds=15))
    assert [x.to_dict() for x in a.logs] == [x.to_dict() for x in b.logs]
    assert all(np.array_equal(a.final_params[k].data, b.final_params[k].data) for k in a.final_params)


def test_initial_broadcast_fills_caches(iris):
    cfg, silos, test, seeds = _setup(iris)
    run = FederationRun(cfg, silos, test, seeds)
    run.initial_broadcast()
    for c in run.clients:
        assert set(c.neighbor_cache) == set(run.graph.row(c.id))
        assert len(run.history[c.id]) == 1


def test_no_action_freezes_caches(iris):
    run = _run_until(iris, "no-action", 5)
    dead = run.dead
    frozen = {c.id: c.neighbor_cache[dead] for c in run.clients if c.alive}
    for _ in range(6):
        run_round(run)
    for cid, p in frozen.items():
        assert run.clients[cid].neighbor_cache[dead] is p
    with pytest.raises(DeadClientError):
        run.clients[dead].silo
    assert len(run.logs[-1].accuracies) == 3
    assert run.logs[-1].local_steps[dead] == 0


def test_no_action_skips_pairs_with_dead_client(iris):
    run = _run_until(iris, "no-action", 25)
    after = run.logs[5:]
    for log in after:
        for p in log.pairs:
            assert (run.dead in p) == (p in log.skipped_pairs)


def test_drop_prunes_graph(iris):
    run = _run_until(iris, "drop", 5)
    dead = run.dead
    assert run.graph.row(dead) == {}
    assert all(dead not in c.neighbor_cache for c in run.clients if c.alive)
    for _ in range(5):
        run_round(run)
    for log in run.logs[5:]:
        assert dead not in log.accuracies and len(log.accuracies) == 2
        assert all(dead not in p for p in log.pairs)
        assert len(log.pairs) == 1  # only one live edge remains


@pytest.mark.parametrize("strategy", ["random", "model-inversion", "gradient-inversion"])
def test_adaptive_strategies_install_virtual_client(iris, strategy):
    run = _run_until(iris, strategy, 5)
    dead = run.dead
    v = run.clients[dead]
    assert v.virtual and v.alive
    assert v is not run.retired[dead]
    with pytest.raises(DeadClientError):
        run.retired[dead].silo
    assert set(v.neighbor_cache) == set(run.graph.row(dead))
    for j, p in v.neighbor_cache.items():
        assert p is run.clients[j].params
    syn = run.synthetic
    assert syn.X.min() >= 0.0 and syn.X.max() <= 1.0 and len(syn) == 12
    run_round(run)
    assert run.logs[-1].local_steps[dead] >= 5


def test_virtual_client_starts_from_last_broadcast(iris):
    run = _run_until(iris, "model-inversion", 5)
    assert run.clients[run.dead].params is run.dead_snapshots[-1]


def test_dropout_errors(iris):
    run = _run_until(iris, "drop", 5)
    with pytest.raises(StateError):
        inject_dropout(run)
    ref = _run_until(iris, "reference", 2)
    with pytest.raises(StateError):
        inject_dropout(ref)


def test_gradient_inversion_needs_two_snapshots(iris):
    cfg, silos, test, seeds = _setup(iris, "gradient-inversion")
    run = FederationRun(cfg, silos, test, seeds)
    run.initial_broadcast()
    with pytest.raises(ReconstructionUnavailable):
        inject_dropout(run, 0)


def test_explicit_dropout_client(iris):
    run = _run_until(iris, "drop", 5, dropout_client=2)
    assert run.dead == 2 and run.logs[4].events == ["dropout:2", "removed:2"]


def test_select_pairs():
    rng = np.random.default_rng(0)
    g = CommGraph.fully_connected(3)
    assert len(select_pairs(g, 5, rng)) == 3
    with pytest.raises(ProtocolError):
        select_pairs(CommGraph(np.zeros((3, 3))), 2, rng)


def _log(correct):
    return RoundLog(0, {i: c / 10 for i, c in enumerate(correct)}, dict(enumerate(correct)), {}, [], [], {})


def test_early_stop_rule():
    same = [_log([7, 7, 7])] * 10
    assert early_stop(same)
    assert not early_stop(same[:9])
    assert not early_stop(same[:9] + [_log([7, 7, 6])])
    assert early_stop([_log([1, 2, 3])] + same)
    # equal across clients, not necessarily constant over time
    assert early_stop([_log([k, k, k]) for k in range(10)])


def test_early_stopping_truncates(iris):
    cfg, silos, test, seeds = _setup(iris, rounds=200)
    cfg = FederationConfig(**{**cfg.__dict__, "early_stopping": True})
    res = run_experiment(cfg, silos, test, seeds)
    assert 10 <= len(res.logs) <= 200
    if len(res.logs) < 200:
        assert early_stop(res.logs)
        assert not early_stop(res.logs[:-1])


def test_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(strategy="forget")
    with pytest.raises(ConfigError):
        FederationConfig(local_steps=(0, 3))
    with pytest.raises(ConfigError):
        FederationConfig(dropout_round=200)
    with pytest.raises(ConfigError):
        FederationConfig(pairs=0)


def test_run_fold_holds_out_test(iris):
    plan = kfold_plan(iris, 10, 0)
    cfg = FederationConfig(rounds=6, early_stopping=False)
    res = run_fold(cfg, iris, plan, 4, 0)
    n_test = len(plan.test_indices(4))
    for log in res.logs:
        for acc in log.accuracies.values():
            assert round(acc * n_test) == pytest.approx(acc * n_test)


def test_estimator_api(iris):
    est = DropoutFederation(rounds=20, strategy="drop", random_state=1)
    assert clone(est).get_params() == est.get_params()
    est.fit(iris.X, iris.y + 10)
    assert set(est.predict(iris.X)) <= {10, 11, 12}
    assert est.predict_proba(iris.X).shape == (150, 3)
    assert 0.0 <= est.score(iris.X, iris.y + 10) <= 1.0
    assert len(est.result_.final_params) == 2

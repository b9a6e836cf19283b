import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfldrop import diffmath
from dfldrop.diffmath import ParamVec, layer_shapes
from dfldrop.exceptions import NumericDomainError, ShapeError

from helpers import central_diff, max_rel_err, random_params


# ---------------------------------------------------------------- softmax / CE

def test_softmax_symmetric():
    np.testing.assert_allclose(diffmath.softmax([[0.0, 0.0]]), [[0.5, 0.5]], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    P = diffmath.softmax([[1000.0, 0.0]])
    assert np.all(np.isfinite(P))
    assert P[0, 0] == pytest.approx(1.0)
    assert P[0, 1] < 1e-300 or P[0, 1] == 0.0


def test_softmax_rows_sum_to_one_by_direct_summation():
    rng = np.random.default_rng(0)
    P = diffmath.softmax(rng.normal(size=(4, 3)))
    for row in P:
        total = 0.0
        for v in row:
            assert v >= 0
            total += v
        assert abs(total - 1.0) <= 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(NumericDomainError):
        diffmath.softmax([[np.nan, 1.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariance(Z, c):
    P = diffmath.softmax(Z)
    Q = diffmath.softmax(Z + c)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(P, Q, atol=1e-12)
    assert np.array_equal(P.argmax(axis=1), Q.argmax(axis=1))


def test_cross_entropy_perfect_prediction_is_zero():
    assert diffmath.cross_entropy(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform_is_log_c():
    P = np.full((5, 4), 0.25)
    assert diffmath.cross_entropy(P, [0, 1, 2, 3, 0]) == pytest.approx(np.log(4), abs=1e-12)


def test_cross_entropy_matches_naive_loop():
    rng = np.random.default_rng(1)
    P = diffmath.softmax(rng.normal(size=(7, 5)))
    y = rng.integers(0, 5, size=7)
    expected = sum(-np.log(P[i, y[i]]) for i in range(7)) / 7
    assert diffmath.cross_entropy(P, y) == pytest.approx(expected, abs=1e-12)
    S = diffmath.softmax(rng.normal(size=(7, 5)))
    expected_soft = sum(-sum(S[i, c] * np.log(P[i, c]) for c in range(5)) for i in range(7)) / 7
    assert diffmath.cross_entropy(P, S) == pytest.approx(expected_soft, abs=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        diffmath.cross_entropy(np.full((2, 3), 1 / 3), [0, 3])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)),
       arrays(np.int64, (4,), elements=st.integers(0, 2)))
def test_cross_entropy_nonnegative(Z, y):
    assert diffmath.cross_entropy(diffmath.softmax(Z), y) >= 0.0


# ---------------------------------------------------------------- ParamVec

def test_paramvec_layout_and_readonly():
    p = ParamVec(np.arange(15.0), layer_shapes(4, 3))
    W, b = p.layers()[0]
    assert W.shape == (4, 3) and b.shape == (3,)
    with pytest.raises(ValueError):
        p.data[0] = 1.0
    with pytest.raises(ShapeError):
        ParamVec(np.zeros(14), layer_shapes(4, 3))


# ---------------------------------------------------------------- first-order grads

def test_zero_logreg_balanced_symmetric_batch_has_equal_bias_grads():
    p = ParamVec(np.zeros(2 * 2 + 2), layer_shapes(2, 2))
    X = np.array([[0.3, 0.7], [0.7, 0.3]])
    g = diffmath.grad_params(p, X, [0, 1])
    _, gb = g.layers()[0]
    assert gb[0] == pytest.approx(gb[1], abs=1e-15)


@pytest.mark.parametrize("hidden,tol", [((), 1e-5), ((5, 4), 1e-4)])
def test_grad_params_finite_difference(hidden, tol):
    rng = np.random.default_rng(2)
    p = random_params(rng, 5, 3, hidden)
    X = rng.uniform(size=(6, 5))
    y = rng.integers(0, 3, size=6)

    def f(theta):
        return diffmath.cross_entropy(diffmath.predict_proba(p.with_data(theta), X), y)

    fd = central_diff(f, p.data, h=1e-5)
    assert max_rel_err(diffmath.grad_params(p, X, y).data, fd) < tol


def test_grad_inputs_closed_form_logreg():
    rng = np.random.default_rng(3)
    p = random_params(rng, 4, 3)
    X = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    W, _ = p.layers()[0]
    P = diffmath.predict_proba(p, X)
    onehot = np.eye(3)[y]
    expected = (P - onehot) @ W.T / 5
    np.testing.assert_allclose(diffmath.grad_inputs(p, X, y), expected, atol=1e-14)


def test_grad_inputs_duplicate_rows_identical():
    rng = np.random.default_rng(4)
    p = random_params(rng, 4, 3, (6,))
    X = rng.uniform(size=(4, 4))
    X[2] = X[0]
    dX = diffmath.grad_inputs(p, X, [1, 2, 1, 0])
    np.testing.assert_array_equal(dX[0], dX[2])


@pytest.mark.parametrize("hidden", [(), (6, 5)])
def test_grad_inputs_finite_difference(hidden):
    rng = np.random.default_rng(5)
    p = random_params(rng, 4, 3, hidden)
    X = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    fd = central_diff(lambda Z: diffmath.cross_entropy(diffmath.predict_proba(p, Z), y), X)
    assert max_rel_err(diffmath.grad_inputs(p, X, y), fd) < 1e-5


def test_grad_shape_mismatch():
    p = ParamVec(np.zeros(15), layer_shapes(4, 3))
    with pytest.raises(ShapeError):
        diffmath.grad_params(p, np.zeros((2, 5)), [0, 1])


def test_vjp_probs_finite_difference():
    rng = np.random.default_rng(6)
    p = random_params(rng, 3, 4, (5,))
    X = rng.uniform(size=(4, 3))
    U = rng.normal(size=(4, 4))
    dp, dX = diffmath.vjp_probs(p, X, U)
    fd_p = central_diff(lambda t: np.sum(U * diffmath.predict_proba(p.with_data(t), X)), p.data)
    fd_x = central_diff(lambda Z: np.sum(U * diffmath.predict_proba(p, Z)), X)
    assert max_rel_err(dp, fd_p) < 1e-5
    assert max_rel_err(dX, fd_x) < 1e-5


# ---------------------------------------------------------------- second order

def _gm_value(p, X, Yl, target, kind):
    g = diffmath.grad_params(p, X, diffmath.softmax(Yl) if np.ndim(Yl) == 2 else Yl)
    return diffmath.match_distance(g.data, target.data, kind)[0]


def test_gradmatch_zero_at_own_gradient():
    rng = np.random.default_rng(7)
    p = random_params(rng, 4, 3)
    X = rng.uniform(size=(6, 4))
    Yl = rng.normal(size=(6, 3))
    target = diffmath.grad_params(p, X, diffmath.softmax(Yl))
    value, dX, dY = diffmath.gradmatch(p, X, Yl, target, "l2")
    assert value == pytest.approx(0.0, abs=1e-28)
    np.testing.assert_allclose(dX, 0.0, atol=1e-15)
    np.testing.assert_allclose(dY, 0.0, atol=1e-15)


@pytest.mark.parametrize("kind", ["l2", "cosine"])
@pytest.mark.parametrize("hidden", [(), (5, 4)])
def test_gradmatch_finite_difference(kind, hidden):
    rng = np.random.default_rng(8)
    p = random_params(rng, 4, 3, hidden)
    X = rng.uniform(size=(5, 4))
    Yl = rng.normal(size=(5, 3))
    target = p.with_data(rng.normal(scale=0.3, size=len(p)))
    _, dX, dY = diffmath.gradmatch(p, X, Yl, target, kind)
    fd_x = central_diff(lambda Z: _gm_value(p, Z, Yl, target, kind), X, h=1e-4)
    fd_y = central_diff(lambda Z: _gm_value(p, X, Z, target, kind), Yl, h=1e-4)
    assert max_rel_err(dX, fd_x) < 1e-3
    assert max_rel_err(dY, fd_y) < 1e-3


def test_gradmatch_hard_labels_has_no_label_grad():
    rng = np.random.default_rng(9)
    p = random_params(rng, 4, 3)
    X = rng.uniform(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    target = p.with_data(rng.normal(size=len(p)))
    _, dX, dY = diffmath.gradmatch(p, X, y, target, "l2")
    assert dY is None
    fd = central_diff(lambda Z: _gm_value(p, Z, y, target, "l2"), X, h=1e-4)
    assert max_rel_err(dX, fd) < 1e-3


def test_gradmatch_cosine_stationary_when_aligned():
    rng = np.random.default_rng(10)
    p = random_params(rng, 4, 3)
    X = rng.uniform(size=(6, 4))
    Yl = rng.normal(size=(6, 3))
    g = diffmath.grad_params(p, X, diffmath.softmax(Yl))
    value, dX, dY = diffmath.gradmatch(p, X, Yl, g.with_data(3.0 * g.data), "cosine")
    assert value == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(dX)) < 1e-9 and np.max(np.abs(dY)) < 1e-9


def test_gradmatch_layout_mismatch():
    p = ParamVec(np.zeros(15), layer_shapes(4, 3))
    bad = ParamVec(np.zeros(8), layer_shapes(3, 2))
    with pytest.raises(ShapeError):
        diffmath.gradmatch(p, np.zeros((2, 4)), np.zeros((2, 3)), bad)

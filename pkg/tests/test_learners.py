import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdrl.errors import ShapeError
from groupdrl.learners import (
    FittedPredictor,
    LearnerSpec,
    fit_forest,
    fit_lasso,
    fit_linear,
    predict_batch,
    predictor_from_dict,
    predictor_to_dict,
)
from groupdrl.learners.forest import default_mtry


def test_linear_two_points_interpolated():
    m = fit_linear([[0.0], [1.0]], [0.0, 1.0])
    assert m.coef == pytest.approx([0.0, 1.0], abs=1e-12)


def test_linear_constant_response():
    X = np.random.default_rng(0).standard_normal((20, 3))
    m = fit_linear(X, np.full(20, 2.5))
    assert m.coef[0] == pytest.approx(2.5, abs=1e-12)
    assert np.abs(m.coef[1:]).max() < 1e-12


def test_linear_three_points_normal_equations():
    # x = 0, 1, 2 and y = 1, 2, 4: slope Sxy/Sxx = 3/2, intercept 7/3 - 3/2 = 5/6
    m = fit_linear([[0.0], [1.0], [2.0]], [1.0, 2.0, 4.0])
    assert m.coef[1] == pytest.approx(1.5, abs=1e-12)
    assert m.coef[0] == pytest.approx(5 / 6, abs=1e-12)


def test_linear_payload_length():
    m = fit_linear(np.random.default_rng(1).standard_normal((10, 4)), np.arange(10.0))
    assert m.coef.shape == (5,)


def test_lasso_full_shrinkage_on_noise():
    rng = np.random.default_rng(2)
    X, y = rng.standard_normal((50, 5)), rng.standard_normal(50)
    m = fit_lasso(X, y, penalty_constant=1e6)
    assert np.all(m.coef[1:] == 0.0)
    assert m.coef[0] == pytest.approx(y.mean(), abs=1e-12)


def test_lasso_soft_threshold_on_orthonormal_design():
    n, p = 64, 4
    rng = np.random.default_rng(3)
    Z = np.column_stack([np.ones(n), rng.standard_normal((n, p))])
    Q, _ = np.linalg.qr(Z)
    X = Q[:, 1:] * np.sqrt(n)  # centered columns with X'X / n = I
    y = X[:, 0].copy()
    m = fit_lasso(X, y, lambdas=0.2)
    assert m.coef[1] == pytest.approx(0.8, abs=1e-8)
    assert np.abs(m.coef[2:]).max() < 1e-8


def test_lasso_without_penalty_matches_least_squares():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((60, 4))
    y = X @ [1.0, -2.0, 0.5, 0.0] + rng.standard_normal(60)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = fit_lasso(X, y, penalty_constant=0.0)
    b = fit_linear(X, y)
    assert np.max(np.abs(a.coef - b.coef)) < 1e-6


def test_lasso_small_penalty_constant_warns():
    rng = np.random.default_rng(5)
    with pytest.warns(RuntimeWarning, match="sqrt"):
        fit_lasso(rng.standard_normal((30, 3)), rng.standard_normal(30), penalty_constant=1.0)


def test_lasso_objective_decreases_every_sweep():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((40, 30))
    X[:, 1] = X[:, 0] + 0.05 * rng.standard_normal(40)
    y = X[:, 0] - X[:, 2] + rng.standard_normal(40)
    trace: list = []
    fit_lasso(X, y, penalty_constant=2.0, trace=trace)
    assert len(trace) >= 2
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_lasso_cross_validation_runs():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((80, 10))
    y = 2 * X[:, 0] + rng.standard_normal(80)
    m = fit_lasso(X, y, cv_folds=5, seed=1)
    assert m.info["cv_folds"] == 5
    assert abs(m.coef[1] - 2.0) < 0.5


def test_forest_constant_response():
    X = np.random.default_rng(8).standard_normal((50, 2))
    m = fit_forest(X, np.full(50, 3.0), n_trees=5, seed=0)
    assert np.all(m.predict(X) == 3.0)


def test_forest_seed_reproducible():
    rng = np.random.default_rng(9)
    X, y = rng.standard_normal((80, 3)), rng.standard_normal(80)
    a = fit_forest(X, y, n_trees=10, seed=4).predict(X)
    b = fit_forest(X, y, n_trees=10, seed=4).predict(X)
    assert np.array_equal(a, b)


def test_forest_learns_a_step():
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, (2000, 1))
    y = (X[:, 0] > 0).astype(float)
    m = fit_forest(X, y, n_trees=100, seed=0)
    Xt = rng.uniform(-1, 1, (2000, 1))
    assert np.mean((m.predict(Xt) - (Xt[:, 0] > 0)) ** 2) < 0.02


def test_single_unbootstrapped_tree_interpolates():
    rng = np.random.default_rng(11)
    X, y = rng.standard_normal((40, 2)), rng.standard_normal(40)
    m = fit_forest(X, y, n_trees=1, mtry=2, min_leaf=1, seed=0, bootstrap=False)
    assert np.array_equal(m.predict(X), y)


def test_default_mtry():
    assert [default_mtry(p) for p in (1, 3, 4, 200)] == [1, 1, 2, 67]


def test_predict_batch_linear_by_hand():
    m = FittedPredictor("linear", {"coef": [1.0, 2.0]}, 1)
    assert predict_batch(m, [[0.0], [3.0]]).tolist() == [1.0, 7.0]


def test_predict_batch_empty_input():
    m = FittedPredictor("linear", {"coef": [1.0, 2.0]}, 1)
    assert predict_batch(m, np.empty((0, 1))).shape == (0,)


def test_predict_batch_wrong_width():
    m = FittedPredictor("linear", {"coef": [1.0, 2.0, 3.0]}, 2)
    with pytest.raises(ShapeError):
        m.predict(np.zeros((3, 3)))


@pytest.mark.parametrize("kind", ["linear", "lasso", "forest"])
def test_serialization_is_exact(kind):
    rng = np.random.default_rng(12)
    X, y = rng.standard_normal((60, 3)), rng.standard_normal(60)
    m = LearnerSpec(kind, {"n_trees": 5} if kind == "forest" else {}).fit(X, y, seed=1, group_id=2, fit_scope="half_b")
    back = predictor_from_dict(json.loads(json.dumps(predictor_to_dict(m))))
    Xt = rng.standard_normal((30, 3))
    assert np.array_equal(m.predict(Xt), back.predict(Xt))
    assert (back.group_id, back.fit_scope, back.kind) == (2, "half_b", kind)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["linear", "lasso", "forest"]),
       n=st.integers(6, 40), p=st.integers(1, 5))
def test_fit_then_predict_is_finite_and_pure(seed, kind, n, p):
    rng = np.random.default_rng(seed)
    X, y = rng.standard_normal((n, p)), rng.standard_normal(n)
    m = LearnerSpec(kind, {"n_trees": 3} if kind == "forest" else {}).fit(X, y, seed=seed)
    a = m.predict(X)
    assert np.isfinite(a).all()
    assert np.array_equal(a, m.predict(X.copy()))
    assert np.array_equal(m.predict(X[:1]), a[:1])

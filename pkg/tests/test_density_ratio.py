import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdrl.data import TargetSample
from groupdrl.density_ratio import (
    DensityRatioModel,
    eval_ratio,
    fit_bayes_logistic,
    identity_ratio,
    ratio_from_dict,
    ratio_to_dict,
)
from groupdrl.errors import ShapeError, ValidationError


def test_zero_coefficients_give_unit_ratio():
    m = DensityRatioModel("logistic", [0.0, 0.0], size_ratio=1.0)
    assert np.all(eval_ratio(m, np.random.default_rng(0).standard_normal((5, 1))) == 1.0)


def test_intercept_only_log_three():
    m = DensityRatioModel("logistic", [math.log(3), 0.0, 0.0], size_ratio=1.0)
    assert eval_ratio(m, np.ones((4, 2))) == pytest.approx(np.full(4, 3.0), rel=1e-14)


def test_size_ratio_scales():
    m = DensityRatioModel("logistic", [0.0, 0.0], size_ratio=0.5)
    assert np.all(eval_ratio(m, np.zeros((3, 1))) == 0.5)


def test_identity_kind_is_exactly_one():
    assert np.array_equal(eval_ratio(identity_ratio(), np.random.default_rng(1).standard_normal((7, 3))), np.ones(7))


def test_identical_laws_give_ratio_near_one():
    rng = np.random.default_rng(2)
    Xs = rng.standard_normal((2000, 3))
    target = TargetSample(rng.standard_normal((2000, 3)))
    m = fit_bayes_logistic(Xs, target, l1_penalty=5.0)
    assert np.max(np.abs(eval_ratio(m, target.covariates) - 1.0)) < 0.2


def test_gaussian_mean_shift_slope():
    # P = N(0, 1), Q = N(1, 1): log dQ/dP = x - 1/2
    rng = np.random.default_rng(3)
    Xs = rng.standard_normal((5000, 1))
    target = TargetSample(1.0 + rng.standard_normal((5000, 1)))
    m = fit_bayes_logistic(Xs, target)
    assert abs(m.gamma[1] - 1.0) < 0.15
    assert abs(m.gamma[0] + 0.5) < 0.15


def test_ratio_positive_and_finite_even_for_extreme_inputs():
    m = DensityRatioModel("logistic", [0.0, 50.0])
    r = eval_ratio(m, np.array([[-1e6], [0.0], [1e6]]))
    assert np.all(r > 0) and np.all(np.isfinite(r))


@settings(max_examples=30, deadline=None)
@given(g=st.lists(st.floats(-3, 3), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_ratio_monotone_in_linear_score(g, seed):
    m = DensityRatioModel("logistic", g)
    X = np.random.default_rng(seed).standard_normal((50, 2))
    score = X @ np.asarray(g[1:])
    order = np.argsort(score, kind="stable")
    r = eval_ratio(m, X)[order]
    assert np.all(np.diff(r) >= -1e-12 * r[1:])


def test_width_mismatch():
    with pytest.raises(ShapeError):
        eval_ratio(DensityRatioModel("logistic", [0.0, 1.0]), np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        fit_bayes_logistic(np.zeros((5, 2)), TargetSample(np.zeros((5, 3))))


def test_negative_penalty_rejected():
    with pytest.raises(ValidationError):
        fit_bayes_logistic(np.zeros((5, 1)), TargetSample(np.zeros((5, 1))), l1_penalty=-1)


def test_serialization_round_trip():
    rng = np.random.default_rng(4)
    m = fit_bayes_logistic(rng.standard_normal((100, 2)), TargetSample(0.5 + rng.standard_normal((80, 2))),
                           group_id=3, fit_scope="half_b")
    back = ratio_from_dict(json.loads(json.dumps(ratio_to_dict(m))))
    X = rng.standard_normal((10, 2))
    assert np.array_equal(eval_ratio(m, X), eval_ratio(back, X))
    assert back.size_ratio == pytest.approx(100 / 80)
    assert (back.group_id, back.fit_scope) == (3, "half_b")


def test_separable_classes_warn_and_stay_bounded():
    Xs = np.linspace(-3, -1, 30).reshape(-1, 1)
    target = TargetSample(np.linspace(1, 3, 30).reshape(-1, 1))
    with pytest.warns(RuntimeWarning, match="separable"):
        m = fit_bayes_logistic(Xs, target)
    assert np.all(np.isfinite(eval_ratio(m, np.array([[-100.0], [100.0]]))))

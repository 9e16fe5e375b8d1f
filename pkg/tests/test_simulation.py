import numpy as np
import pytest
from scipy import stats

from groupdrl.errors import ValidationError
from groupdrl.estimator import fit_erm
from groupdrl.evaluation import empirical_reward
from groupdrl.learners import LearnerSpec
from groupdrl.simulation import ScenarioSpec, generate, run_experiment
from groupdrl.simulation.generators import (
    INDICATOR_VALUES,
    gen_highdim_shared,
    gen_indicator,
    interaction_features,
)
from groupdrl.simulation.experiments import load_registry, resolve_params

LINEAR = {"kind": "linear", "params": {}}


@pytest.mark.parametrize("design", ["interaction", "indicator", "highdim_shared"])
def test_fixed_seed_is_bit_identical(design):
    spec = ScenarioSpec(design, 3, n_per_group=50, n_Q=40, seed=7)
    (ga, ta, _), (gb, tb, _) = generate(spec), generate(spec)
    assert np.array_equal(ta.covariates, tb.covariates)
    for a, b in zip(ga, gb):
        assert np.array_equal(a.covariates, b.covariates) and np.array_equal(a.outcomes, b.outcomes)


def test_different_seeds_differ():
    a = generate(ScenarioSpec("interaction", 2, n_per_group=20, n_Q=10, seed=1))[0][0].outcomes
    b = generate(ScenarioSpec("interaction", 2, n_per_group=20, n_Q=10, seed=2))[0][0].outcomes
    assert not np.array_equal(a, b)


def test_zero_coefficients_give_pure_noise():
    groups, _, truth = generate(ScenarioSpec("interaction", 2, n_per_group=2000, n_Q=10, zero_coefficients=True))
    X = np.random.default_rng(0).standard_normal((50, 5))
    assert np.all(truth.mean_matrix(X) == 0.0)
    erm = fit_erm(groups, LearnerSpec("linear"))
    Xt = np.random.default_rng(1).standard_normal((5000, 5))
    yt = np.random.default_rng(2).standard_normal(5000)
    assert abs(empirical_reward(erm.predict(Xt), yt).reward) < 0.01


def test_interaction_features_are_centered():
    X = np.random.default_rng(3).standard_normal((1_000_000, 5))
    F = interaction_features(X)[:, 5:]
    se = F.std(axis=0) / np.sqrt(X.shape[0])
    assert np.all(np.abs(F.mean(axis=0)) <= 3 * se)


def test_interaction_coefficients_on_the_stated_support():
    _, _, truth = generate(ScenarioSpec("interaction", 200, n_per_group=3, n_Q=5, seed=4))
    c = np.concatenate([truth.coefficients["alpha"].ravel(), truth.coefficients["beta"].ravel()])
    assert set(np.unique(c)) <= {0.0, 0.2, 0.4}
    freq = np.array([np.mean(c == v) for v in (0.4, 0.2, 0.0)])
    assert np.allclose(freq, [0.3, 0.4, 0.3], atol=0.02)


def test_indicator_truth_by_hand():
    _, _, truth = gen_indicator(ScenarioSpec("indicator", 5, n_per_group=5, n_Q=5, seed=5))
    x = np.ones((1, 4))
    for l in range(5):
        a, b, g = (truth.coefficients[k][l] for k in ("alpha", "beta", "gamma"))
        # at x = 1 every indicator is on: sum(alpha) + sum(beta) - sum(gamma)
        assert truth.models[l](x)[0] == pytest.approx(a.sum() + b.sum() - g.sum(), abs=1e-12)


def test_indicator_coefficient_frequencies():
    _, _, truth = gen_indicator(ScenarioSpec("indicator", 500, n_per_group=3, n_Q=5, seed=6))
    c = np.concatenate([truth.coefficients[k].ravel() for k in ("alpha", "beta", "gamma")])
    counts = np.array([np.sum(c == v) for v in INDICATOR_VALUES])
    assert counts.sum() == c.size
    assert stats.chisquare(counts).pvalue > 1e-3


def test_highdim_sparsity_and_base_norm():
    _, _, truth, base = gen_highdim_shared(ScenarioSpec("highdim_shared", 4, n_per_group=20, n_Q=10, seed=8))
    assert np.linalg.norm(base) == pytest.approx(0.5 * np.sqrt(10), abs=1e-14)
    assert np.all(truth.coefficients["group"][:, 13:] == 0.0)
    assert np.all(truth.coefficients["target"][13:] == 0.0)
    assert np.all(truth.coefficients["group"][:, :10] == 0.5)


def test_highdim_group_average_shrinks():
    avg = []
    for L in (4, 400):
        means = [np.abs(gen_highdim_shared(ScenarioSpec("highdim_shared", L, n_per_group=3, n_Q=3, p=13, seed=s))[2]
                        .coefficients["group"][:, 10:13].mean(axis=0)).mean() for s in range(20)]
        avg.append(np.mean(means))
    assert avg[1] < avg[0] / 3


def test_exact_target_reward_is_its_second_moment():
    spec = ScenarioSpec("interaction", 3, n_per_group=5, n_Q=5, q_tar=(0.2, 0.3, 0.5), seed=9)
    _, _, truth = generate(spec)
    rng = np.random.default_rng(10)
    X = truth.sample_target_covariates(100_000, rng)
    fq = truth.f_Q(X)
    eps = rng.standard_normal(X.shape[0])
    r = empirical_reward(fq, fq + eps).reward
    # reward(f_Q) = E[f_Q^2] + 2 E[f_Q eps] exactly on the sample
    assert r == pytest.approx(np.mean(fq**2) + 2 * np.mean(fq * eps), abs=1e-10)
    assert abs(2 * np.mean(fq * eps)) < 4 * 2 * np.std(fq * eps) / np.sqrt(X.shape[0])


def test_spec_validation():
    with pytest.raises(ValidationError):
        ScenarioSpec("interaction", 2, p=6)
    with pytest.raises(ValidationError):
        ScenarioSpec("unknown", 2)
    with pytest.raises(ValidationError):
        ScenarioSpec("interaction", 2, q_sou=(0.5, 0.6))


def test_registry_covers_the_experiments():
    reg = load_registry()
    assert {"fig2-L2", "fig3-varyL", "fig4-esweep", "fig5-rhosweep", "fig7", "fig8-highdim", "fig9-weights"} <= set(reg)
    for entry in reg.values():
        assert {"runner", "design", "anchor", "paper"} <= set(entry)


def test_unknown_experiment():
    with pytest.raises(ValidationError):
        resolve_params("nope")


def test_weight_error_smoke():
    r = run_experiment("fig7", scale="ci", n=200, reps=5)
    rows = r["weight_error"]
    methods = {x["method"] for x in rows}
    assert {"plugin", "corrected-logistic"} <= methods
    assert all(np.isfinite(x["q_err"]) and x["q_err"] >= 0 for x in rows)
    assert len(rows) == 5 * len(methods)


def test_mixture_rewards_schema():
    r = run_experiment("fig2-L2", scale="ci", reps=2, n_P_per_group=100, n_Q=300, grid_step=0.25, learner=LINEAR)
    rows = r["rewards"]
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    for m in ("DRL0", "ERM", "DRO-sq"):
        for q in r["params"]["q_sou_list"]:
            for rep in range(2):
                xs = sorted(x["x"] for x in rows if x["method"] == m and x["measure"] == "q_tar1"
                            and x["q_sou"] == q and x["rep"] == rep)
                assert xs == grid


def test_highdim_weights_sum_to_one():
    r = run_experiment("fig9-weights", scale="ci", reps=2)
    by = {}
    for row in r["weights"]:
        by.setdefault((row["rep"], row["n"]), []).append(row["weight"])
    assert by and all(abs(sum(w) - 1) < 1e-9 for w in by.values())


def test_experiment_is_deterministic():
    kw = dict(scale="ci", reps=2, n_P_per_group=60, n_Q=200, grid_step=0.5, learner=LINEAR, seed=3)
    assert run_experiment("fig2-L2", **kw)["rewards"] == run_experiment("fig2-L2", **kw)["rewards"]

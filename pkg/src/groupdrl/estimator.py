"""End-to-end fitting of the group-robust aggregate and its baselines.

The pipeline for ``fit_drl``:

1. fit the full-data, half-A and half-B models of every group;
2. fit half-A and half-B density ratios against the target (skipped when
   ``shift_mode == "none"``);
3. compute, per group l, column l of the two bias-term matrices on the
   complementary halves;
4. assemble the corrected Gamma estimate, repair it to PSD and solve the
   weight problem;
5. aggregate the full-data models with the solved weights.

Each step is a separate function so the federated runner can execute them at
different sites and still reproduce the monolithic result bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import MixtureSpec, SourceGroup, TargetSample, check_common_dimension, make_random_split
from .density_ratio import fit_bayes_logistic, identity_ratio
from .errors import DegenerateDifferenceError, GroupDRLError, ShapeError, StageError, ValidationError
from .gamma import (
    GammaMatrix,
    assemble_corrected,
    gram_from_predictions,
    group_bias_column,
    plugin_gamma,
    predict_matrix,
    psd_repair,
)
from .learners import FittedPredictor, LearnerSpec, predictor_from_dict, predictor_to_dict
from .weights import UncertaintySet, WeightSolution, solve_weights

MODEL_VERSION = 1
SHIFT_MODES = ("none", "logistic_ratio")
SPLIT_MODES = ("deterministic", "seeded", "no_split")
SCOPE_INDEX = {"full": 0, "half_a": 1, "half_b": 2}


@dataclass(frozen=True)
class FitConfig:
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    h_set: UncertaintySet | None = None
    shift_mode: str = "none"
    split_mode: str = "deterministic"
    seed: int = 0
    ratio_l1: float = 0.0
    psd_ridge: float = 1e-10
    solver: str = "auto"
    threads: int = 1

    def __post_init__(self):
        if self.shift_mode not in SHIFT_MODES:
            raise ValidationError(f"shift_mode must be one of {SHIFT_MODES}")
        if self.split_mode not in SPLIT_MODES:
            raise ValidationError(f"split_mode must be one of {SPLIT_MODES}")
        if self.psd_ridge < 0:
            raise ValidationError("psd_ridge must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "learner": self.learner.to_dict(),
            "h_set": None if self.h_set is None else self.h_set.to_dict(),
            "shift_mode": self.shift_mode,
            "split_mode": self.split_mode,
            "seed": self.seed,
            "ratio_l1": self.ratio_l1,
            "psd_ridge": self.psd_ridge,
            "solver": self.solver,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        lr = d.get("learner") or {}
        h = d.get("h_set")
        return cls(
            learner=LearnerSpec(lr.get("kind", "forest"), dict(lr.get("params", {}))),
            h_set=None if h is None else UncertaintySet.from_dict(h),
            shift_mode=d.get("shift_mode", "none"),
            split_mode=d.get("split_mode", "deterministic"),
            seed=int(d.get("seed", 0)),
            ratio_l1=float(d.get("ratio_l1", 0.0)),
            psd_ridge=float(d.get("psd_ridge", 1e-10)),
            solver=d.get("solver", "auto"),
            threads=int(d.get("threads", 1)),
        )


def substream_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a named (group, purpose) substream."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def fingerprint(config: FitConfig, groups: Sequence[SourceGroup], target: TargetSample) -> str:
    h = hashlib.sha256(json.dumps(config.to_dict(), sort_keys=True).encode())
    for g in groups:
        h.update(np.ascontiguousarray(g.covariates).tobytes())
        h.update(np.ascontiguousarray(g.outcomes).tobytes())
        h.update(np.ascontiguousarray(g.split_a).tobytes())
    h.update(np.ascontiguousarray(target.covariates).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DRLModel:
    weights: MixtureSpec
    predictors: tuple
    gamma: GammaMatrix
    h_set: UncertaintySet
    config_fingerprint: str = ""
    kind: str = "drl"
    solution: WeightSolution | None = None
    gamma_raw: GammaMatrix | None = None
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if len(self.predictors) != len(self.weights):
            raise ValidationError("one weight per predictor is required")
        if abs(float(np.sum(self.weights.weights)) - 1.0) > 1e-9:
            raise GroupDRLError("internal invariant violated: weights do not sum to 1")

    @property
    def L(self) -> int:
        return len(self.predictors)

    @property
    def p(self) -> int:
        return self.predictors[0].p

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    __call__ = predict


def predict(model: DRLModel, X) -> np.ndarray:
    """sum_l w_l f_l(X), accumulated in group order."""
    w = model.weights.weights
    out = w[0] * model.predictors[0].predict(X)
    for l in range(1, model.L):
        out = out + w[l] * model.predictors[l].predict(X)
    return out


# ---------------------------------------------------------------------------
# pipeline stages


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except GroupDRLError as exc:
                raise StageError(name, exc) from exc

        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner

    return wrap


def prepare_groups(groups: Sequence[SourceGroup], config: FitConfig) -> list[SourceGroup]:
    if config.split_mode == "seeded":
        return [make_random_split(g, substream_seed(config.seed, l, 99)) for l, g in enumerate(groups)]
    return list(groups)


def fit_site_models(group: SourceGroup, l: int, config: FitConfig) -> dict:
    """The full, half-A and half-B models of group ``l`` (local to its site)."""
    full = fit_full_model(group, l, config)
    if config.split_mode == "no_split":
        return {
            "full": full,
            "half_a": full.with_meta(fit_scope="half_a"),
            "half_b": full.with_meta(fit_scope="half_b"),
        }
    out = {"full": full}
    for scope in ("half_a", "half_b"):
        Xh, yh = group.half(scope)
        out[scope] = config.learner.fit(Xh, yh, substream_seed(config.seed, l, SCOPE_INDEX[scope]), l, scope)
    return out


def fit_site_ratios(group: SourceGroup, l: int, target: TargetSample, config: FitConfig) -> dict:
    if config.shift_mode == "none":
        return {s: identity_ratio(l, s) for s in ("half_a", "half_b")}
    return {
        s: fit_bayes_logistic(group.half(s)[0], target, config.ratio_l1, group_id=l, fit_scope=s)
        for s in ("half_a", "half_b")
    }


def site_bias_columns(
    group: SourceGroup,
    l: int,
    predictors: dict,
    ratios: dict,
    shift_mode: str,
) -> dict:
    """Column l of both bias-term matrices; ``predictors[scope]`` lists all L models."""
    out = {}
    for scope in ("half_a", "half_b"):
        r = None if shift_mode == "none" else ratios[scope]
        out[scope] = group_bias_column(predictors[scope], group, r, scope, l)
    return out


def assemble_gamma(
    predictors_a: Sequence[FittedPredictor],
    predictors_b: Sequence[FittedPredictor],
    columns_a: Sequence[np.ndarray],
    columns_b: Sequence[np.ndarray],
    target: TargetSample,
    shift_mode: str,
) -> GammaMatrix:
    gram_a = gram_from_predictions(predict_matrix(predictors_a, target.covariates))
    gram_b = gram_from_predictions(predict_matrix(predictors_b, target.covariates))
    D_a = np.column_stack(columns_a)
    D_b = np.column_stack(columns_b)
    prov = "bias_corrected_noshift" if shift_mode == "none" else "bias_corrected_shift"
    return assemble_corrected(gram_a, D_a, gram_b, D_b, prov)


def solve_stage(raw: GammaMatrix, config: FitConfig, L: int):
    h_set = config.h_set or UncertaintySet.full_simplex(L)
    repaired = psd_repair(raw, config.psd_ridge)
    sol = solve_weights(repaired, h_set, config.solver)
    return repaired, h_set, sol


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def _check_inputs(groups, target):
    if len(groups) == 0:
        raise ValidationError("at least one source group is required")
    check_common_dimension(groups, target)


def fit_full_model(group: SourceGroup, l: int, config: FitConfig) -> FittedPredictor:
    return config.learner.fit(group.covariates, group.outcomes, substream_seed(config.seed, l, 0), l, "full")


def _fit_local(groups, config, need_halves=True):
    fn = fit_site_models if need_halves else (lambda g, l, c: {"full": fit_full_model(g, l, c)})
    t0 = time.perf_counter()
    models = _stage("local_fits")(_map)(lambda lg: fn(lg[1], lg[0], config), list(enumerate(groups)), config.threads)
    return models, {"local_fits": time.perf_counter() - t0}


def fit_drl(groups: Sequence[SourceGroup], target: TargetSample, config: FitConfig | None = None) -> DRLModel:
    """Bias-corrected group-robust aggregate of per-group learners."""
    config = config or FitConfig()
    _check_inputs(groups, target)
    groups = prepare_groups(groups, config)
    L = len(groups)
    models, timings = _fit_local(groups, config)
    full = [m["full"] for m in models]
    if L == 1:
        return _single_group_model(full, target, config, groups, timings)

    t0 = time.perf_counter()
    ratios = _stage("ratio_fits")(_map)(
        lambda lg: fit_site_ratios(lg[1], lg[0], target, config), list(enumerate(groups)), config.threads
    )
    timings["ratio_fits"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    half = {s: [m[s] for m in models] for s in ("half_a", "half_b")}
    cols = _stage("bias_terms")(
        lambda: [site_bias_columns(g, l, half, ratios[l], config.shift_mode) for l, g in enumerate(groups)]
    )()
    timings["bias_terms"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    raw = _stage("gamma_assembly")(assemble_gamma)(
        half["half_a"], half["half_b"],
        [c["half_a"] for c in cols], [c["half_b"] for c in cols],
        target, config.shift_mode,
    )
    timings["gamma_assembly"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    repaired, h_set, sol = _stage("weight_solve")(solve_stage)(raw, config, L)
    timings["weight_solve"] = time.perf_counter() - t0
    return DRLModel(
        sol.q, full, repaired, h_set, fingerprint(config, groups, target), "drl", sol, raw,
        diagnostics={"ratio_info": [[ratios[l][s].info for s in ("half_a", "half_b")] for l in range(L)]},
        timings=timings,
    )


def _single_group_model(full, target, config, groups, timings) -> DRLModel:
    gamma = plugin_gamma(full, target)
    h_set = UncertaintySet.full_simplex(1)
    sol = solve_weights(gamma, h_set)
    return DRLModel(sol.q, full, gamma, h_set, fingerprint(config, groups, target), "drl", sol, gamma,
                    timings=timings)


def fit_plugin_drl(groups: Sequence[SourceGroup], target: TargetSample, config: FitConfig | None = None) -> DRLModel:
    """Same aggregation with the uncorrected plug-in Gamma from full-data fits."""
    config = config or FitConfig()
    _check_inputs(groups, target)
    groups = prepare_groups(groups, config)
    models, timings = _fit_local(groups, config, need_halves=False)
    full = [m["full"] for m in models]
    t0 = time.perf_counter()
    raw = _stage("gamma_assembly")(plugin_gamma)(full, target)
    repaired, h_set, sol = _stage("weight_solve")(solve_stage)(raw, config, len(full))
    timings["weight_solve"] = time.perf_counter() - t0
    return DRLModel(sol.q, full, repaired, h_set, fingerprint(config, groups, target), "plugin", sol, raw,
                    timings=timings)


def fit_erm(groups: Sequence[SourceGroup], learner: LearnerSpec | None = None, seed: int = 0) -> FittedPredictor:
    """One learner on the pooled rows of all groups."""
    if not groups:
        raise ValidationError("at least one source group is required")
    check_common_dimension(groups)
    learner = learner or LearnerSpec()
    X = np.vstack([g.covariates for g in groups])
    y = np.concatenate([g.outcomes for g in groups])
    return learner.fit(X, y, substream_seed(seed, 10_000, 0), 0, "full")


def sq_dro_weight(noise_diff: float, diff_sq: float) -> float:
    """q1 minimizing max_l (sigma_l^2 + ||f_l - f_q||^2) for two groups.

    Equalizing the two losses gives (2 q1 - 1) ||f1 - f2||^2 = sigma1^2 - sigma2^2.
    """
    if diff_sq < 1e-12:
        raise DegenerateDifferenceError(f"||f1 - f2||^2 = {diff_sq:.3e} is numerically zero")
    return float(min(max(0.5 + noise_diff / (2.0 * diff_sq), 0.0), 1.0))


def fit_sq_dro_L2(
    groups: Sequence[SourceGroup],
    target: TargetSample,
    learner: LearnerSpec | None = None,
    seed: int = 0,
) -> DRLModel:
    """Squared-loss robust aggregate for exactly two groups (closed-form weights)."""
    if len(groups) != 2:
        raise ValidationError("fit_sq_dro_L2 needs exactly two groups")
    check_common_dimension(groups, target)
    learner = learner or LearnerSpec()
    full = [learner.fit(g.covariates, g.outcomes, substream_seed(seed, l, 0), l, "full") for l, g in enumerate(groups)]
    # in-sample residual variance, denominator n_l
    sig = [float(np.mean((g.outcomes - f.predict(g.covariates)) ** 2)) for g, f in zip(groups, full)]
    F = predict_matrix(full, target.covariates)
    diff_sq = float(np.mean((F[0] - F[1]) ** 2))
    q1 = sq_dro_weight(sig[0] - sig[1], diff_sq)
    gamma = GammaMatrix(gram_from_predictions(F), "plugin")
    cfg = FitConfig(learner=learner, seed=seed)
    return DRLModel(
        MixtureSpec([q1, 1.0 - q1]), full, gamma, UncertaintySet.full_simplex(2),
        fingerprint(cfg, groups, target), "sq_dro",
        diagnostics={"residual_variance": sig, "difference_norm_sq": diff_sq},
    )


# ---------------------------------------------------------------------------
# export / import


def model_to_dict(model: DRLModel, include_timings: bool = True) -> dict:
    d = {
        "version": MODEL_VERSION,
        "kind": model.kind,
        "weights": model.weights.tolist(),
        "predictors": [predictor_to_dict(f) for f in model.predictors],
        "gamma": model.gamma.to_dict(),
        "gamma_raw": None if model.gamma_raw is None else model.gamma_raw.to_dict(),
        "h_set": model.h_set.to_dict(),
        "config_fingerprint": model.config_fingerprint,
        "solution": None if model.solution is None else model.solution.to_dict(),
        "diagnostics": model.diagnostics,
    }
    if include_timings:
        d["timings"] = model.timings
    return d


def model_digest(model: DRLModel) -> str:
    """Hash of everything except wall-clock timings."""
    raw = json.dumps(model_to_dict(model, include_timings=False), sort_keys=True, default=str)
    return hashlib.sha256(raw.encode()).hexdigest()


def model_from_dict(d: dict) -> DRLModel:
    if d.get("version") != MODEL_VERSION:
        raise ValidationError(f"unsupported model version {d.get('version')!r}")
    try:
        raw, sol = d.get("gamma_raw"), d.get("solution")
        return DRLModel(
            MixtureSpec(d["weights"]),
            [predictor_from_dict(p) for p in d["predictors"]],
            GammaMatrix.from_dict(d["gamma"]),
            UncertaintySet.from_dict(d["h_set"]),
            d.get("config_fingerprint", ""),
            d.get("kind", "drl"),
            None if sol is None else WeightSolution.from_dict(sol),
            None if raw is None else GammaMatrix.from_dict(raw),
            diagnostics=d.get("diagnostics", {}),
            timings=d.get("timings", {}),
        )
    except KeyError as exc:
        raise ValidationError(f"model file is missing field {exc}") from exc


def save_model(model: DRLModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, default=str)


def load_model(path) -> DRLModel:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(d)


def check_predict_shape(model: DRLModel, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != model.p:
        raise ShapeError(f"model expects {model.p} columns, got {X.shape}")

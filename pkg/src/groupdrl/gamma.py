"""Estimators of Gamma_{k,l} = E_Q[f_k(X) f_l(X)].

``plugin_gamma`` averages products of fitted models over target covariates.
``bias_corrected_gamma`` subtracts cross-fitted, ratio-weighted
residual-product terms from the half-sample plug-in matrices and averages the
two split roles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import SourceGroup, TargetSample
from .density_ratio import DensityRatioModel, eval_ratio
from .errors import ShapeError, ValidationError
from .learners import FittedPredictor

PROVENANCES = ("plugin", "bias_corrected_noshift", "bias_corrected_shift", "exact", "monte_carlo")


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GammaMatrix:
    values: np.ndarray
    provenance: str = "plugin"
    psd_repaired: bool = False
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        v = _readonly(self.values)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ShapeError(f"Gamma must be square, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("Gamma has non-finite entries")
        if not np.array_equal(v, v.T):
            raise ValidationError("Gamma must be exactly symmetric")
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", v)

    @property
    def L(self) -> int:
        return self.values.shape[0]

    def to_dict(self) -> dict:
        d = {
            "values": self.values.tolist(),
            "provenance": self.provenance,
            "psd_repaired": self.psd_repaired,
        }
        for k, v in self.details.items():
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GammaMatrix":
        extra = {k: np.asarray(v) if isinstance(v, list) else v
                 for k, v in d.items() if k not in ("values", "provenance", "psd_repaired")}
        return cls(d["values"], d["provenance"], bool(d["psd_repaired"]), extra)


@dataclass(frozen=True, eq=False)
class BiasTermMatrix:
    """Entry (k, l) is the correction term D_{k,l}; not symmetric in general."""

    values: np.ndarray
    split_scope: str

    def __post_init__(self):
        v = _readonly(self.values)
        if not np.isfinite(v).all():
            raise ValidationError("bias terms are not finite")
        object.__setattr__(self, "values", v)


def symmetrize_upper(M: np.ndarray) -> np.ndarray:
    """Copy the upper triangle (k <= l) onto the lower one."""
    out = np.triu(M)
    iu = np.triu_indices(M.shape[0], 1)
    out[(iu[1], iu[0])] = M[iu]
    return out


def gram_from_predictions(F: np.ndarray) -> np.ndarray:
    """(1/n) sum_j F[k, j] F[l, j] for k <= l, mirrored. ``F`` is L x n."""
    L, n = F.shape
    G = np.empty((L, L))
    for k in range(L):
        for l in range(k, L):
            G[k, l] = G[l, k] = np.mean(F[k] * F[l])
    return G


def predict_matrix(predictors: Sequence[FittedPredictor], X: np.ndarray) -> np.ndarray:
    p = X.shape[1]
    for m in predictors:
        if m.p != p:
            raise ShapeError(f"predictor for group {m.group_id} has p={m.p}, data has p={p}")
    return np.vstack([m.predict(X) for m in predictors])


def plugin_gamma(predictors: Sequence[FittedPredictor], target: TargetSample) -> GammaMatrix:
    F = predict_matrix(predictors, target.covariates)
    return GammaMatrix(gram_from_predictions(F), "plugin")


def bias_column(F_eval: np.ndarray, resid: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    """Column l of D: mean_i w_i f_k(X_i) (f_l(X_i) - Y_i) for every k.

    ``F_eval`` is L x m (all half-fitted models on the m evaluation rows of
    group l), ``resid`` = f_l - Y on those rows. ``weights=None`` is the
    no-shift formula; an all-ones weight vector gives bit-identical output.
    """
    if resid.size == 0:
        raise ValidationError("empty evaluation half")
    L = F_eval.shape[0]
    col = np.empty(L)
    for k in range(L):
        prod = F_eval[k] if weights is None else weights * F_eval[k]
        col[k] = np.mean(prod * resid)
    return col


def _other(scope: str) -> str:
    return "b" if scope in ("a", "half_a") else "a"


def group_bias_column(
    predictors_half: Sequence[FittedPredictor],
    group: SourceGroup,
    ratio: DensityRatioModel | None,
    scope: str,
    l: int,
) -> np.ndarray:
    """Column ``l`` of the bias matrix, computable at the site holding ``group``."""
    Xe, Ye = group.half(_other(scope))
    F = predict_matrix(predictors_half, Xe)
    resid = F[l] - Ye
    w = None if ratio is None else eval_ratio(ratio, Xe)
    return bias_column(F, resid, w)


def bias_terms(
    predictors_half: Sequence[FittedPredictor],
    groups: Sequence[SourceGroup],
    ratios_half: Sequence[DensityRatioModel] | None = None,
    scope: str = "half_a",
) -> BiasTermMatrix:
    """D_{k,l} for all ordered pairs, evaluated on the complementary halves.

    Models fitted on half A of every group are evaluated on the B rows of
    group l (and vice versa). ``ratios_half=None`` selects the no-shift
    formula.
    """
    L = len(groups)
    if len(predictors_half) != L or (ratios_half is not None and len(ratios_half) != L):
        raise ValidationError("need one predictor and one ratio model per group")
    D = np.empty((L, L))
    for l, g in enumerate(groups):
        r = None if ratios_half is None else ratios_half[l]
        D[:, l] = group_bias_column(predictors_half, g, r, scope, l)
    return BiasTermMatrix(D, scope)


def corrected_half(gram_half: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Gamma-tilde^S - D^S - D^S' computed for k <= l and mirrored."""
    L = gram_half.shape[0]
    out = np.empty((L, L))
    for k in range(L):
        for l in range(k, L):
            out[k, l] = out[l, k] = gram_half[k, l] - D[k, l] - D[l, k]
    return out


def assemble_corrected(gram_a, D_a, gram_b, D_b, provenance: str) -> GammaMatrix:
    ga = corrected_half(gram_a, D_a)
    gb = corrected_half(gram_b, D_b)
    L = ga.shape[0]
    out = np.empty((L, L))
    for k in range(L):
        for l in range(k, L):
            out[k, l] = out[l, k] = 0.5 * (ga[k, l] + gb[k, l])
    return GammaMatrix(
        out,
        provenance,
        details={
            "gamma_a": ga,
            "gamma_b": gb,
            "plugin_a": np.asarray(gram_a),
            "plugin_b": np.asarray(gram_b),
            "bias_a": np.asarray(D_a),
            "bias_b": np.asarray(D_b),
        },
    )


def bias_corrected_gamma(
    predictors_a: Sequence[FittedPredictor],
    predictors_b: Sequence[FittedPredictor],
    groups: Sequence[SourceGroup],
    ratios_a: Sequence[DensityRatioModel] | None,
    ratios_b: Sequence[DensityRatioModel] | None,
    target: TargetSample,
) -> GammaMatrix:
    D_a = bias_terms(predictors_a, groups, ratios_a, "half_a").values
    D_b = bias_terms(predictors_b, groups, ratios_b, "half_b").values
    gram_a = gram_from_predictions(predict_matrix(predictors_a, target.covariates))
    gram_b = gram_from_predictions(predict_matrix(predictors_b, target.covariates))
    shift = any(r.kind != "identity" for r in (ratios_a or []) + (ratios_b or []))
    return assemble_corrected(
        gram_a, D_a, gram_b, D_b, "bias_corrected_shift" if shift else "bias_corrected_noshift"
    )


def psd_repair(gamma: GammaMatrix, ridge: float = 0.0) -> GammaMatrix:
    """Clip negative eigenvalues to zero and add ``ridge`` to the diagonal."""
    if ridge < 0:
        raise ValidationError("ridge must be nonnegative")
    G = np.array(gamma.values)
    evals, evecs = np.linalg.eigh(G)
    repaired = bool(evals.min() < 0)
    if repaired:
        G = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
        G = 0.5 * (G + G.T)
    if ridge:
        G[np.diag_indices_from(G)] += ridge
    details = dict(gamma.details)
    if repaired or ridge:
        details["raw"] = np.asarray(gamma.values)
    return GammaMatrix(G, gamma.provenance, repaired or gamma.psd_repaired, details)

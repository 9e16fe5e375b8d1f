"""Base learners for the per-group conditional mean models."""

from __future__ import annotations

from dataclasses import dataclass, field

from .base import (
    FittedPredictor,
    predict_batch,
    predictor_from_bytes,
    predictor_from_dict,
    predictor_to_bytes,
    predictor_to_dict,
)
from .forest import fit_forest, tune_forest
from .lasso import fit_lasso
from .linear import fit_linear


@dataclass(frozen=True)
class LearnerSpec:
    """Which learner to fit and its hyperparameters.

    ``params`` are passed through to the fitting function; forests receive a
    seed derived per (group, scope) by the caller.
    """

    kind: str = "forest"
    params: dict = field(default_factory=dict)

    def fit(self, X, y, seed: int = 0, group_id: int = 0, fit_scope: str = "full") -> FittedPredictor:
        kw = dict(self.params)
        meta = {"group_id": group_id, "fit_scope": fit_scope}
        if self.kind == "linear":
            return fit_linear(X, y, kw.pop("ridge", 0.0), **meta)
        if self.kind == "lasso":
            return fit_lasso(X, y, **kw, **meta)
        if self.kind == "forest":
            if kw.pop("tune", False):
                return tune_forest(X, y, seed=seed, **kw, **meta)
            return fit_forest(X, y, seed=seed, **kw, **meta)
        raise ValueError(f"unknown learner kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


__all__ = [
    "FittedPredictor",
    "LearnerSpec",
    "fit_forest",
    "fit_lasso",
    "fit_linear",
    "tune_forest",
    "predict_batch",
    "predictor_from_bytes",
    "predictor_from_dict",
    "predictor_to_bytes",
    "predictor_to_dict",
]

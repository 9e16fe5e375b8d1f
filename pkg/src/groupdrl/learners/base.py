"""Uniform fitted-predictor type and its JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ShapeError, ValidationError

SERIAL_VERSION = 1
KINDS = ("linear", "lasso", "forest")
SCOPES = ("full", "half_a", "half_b")


def _readonly(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FittedPredictor:
    """An immutable fitted regression function x -> R.

    ``params`` holds the kind-specific payload:

    * linear / lasso: ``coef`` of length p + 1, intercept first.
    * forest: ``feature``, ``threshold``, ``left``, ``right``, ``value`` node
      arrays of all trees concatenated, and ``roots`` (first node of each tree).
    """

    kind: str
    params: dict
    p: int
    group_id: int = 0
    fit_scope: str = "full"
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown predictor kind {self.kind!r}")
        if self.fit_scope not in SCOPES:
            raise ValidationError(f"unknown fit scope {self.fit_scope!r}")
        params = {}
        for k, v in self.params.items():
            dtype = np.int64 if k in ("feature", "left", "right", "roots") else float
            params[k] = _readonly(v, dtype)
        if self.kind in ("linear", "lasso") and params["coef"].shape != (self.p + 1,):
            raise ValidationError(f"coefficient payload must have length p+1={self.p + 1}")
        object.__setattr__(self, "params", params)

    @property
    def coef(self) -> np.ndarray:
        """Intercept-first coefficient vector (linear and lasso only)."""
        return self.params["coef"]

    @property
    def n_trees(self) -> int:
        return int(self.params["roots"].size) if self.kind == "forest" else 0

    def predict(self, X) -> np.ndarray:
        return predict_batch(self, X)

    __call__ = predict

    def with_meta(self, group_id: int | None = None, fit_scope: str | None = None) -> "FittedPredictor":
        return FittedPredictor(
            self.kind,
            dict(self.params),
            self.p,
            self.group_id if group_id is None else group_id,
            self.fit_scope if fit_scope is None else fit_scope,
            dict(self.info),
        )


def predict_batch(model: FittedPredictor, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        # a 1-d input is a column of samples for p == 1, otherwise a single row
        X = X.reshape(-1, 1) if model.p == 1 else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != model.p:
        raise ShapeError(f"expected {model.p} columns, got shape {X.shape}")
    if X.shape[0] == 0:
        return np.empty(0)
    if model.kind in ("linear", "lasso"):
        c = model.params["coef"]
        # row-wise reduction keeps each prediction independent of the batch
        return c[0] + (X * c[1:]).sum(axis=1)
    from .forest import forest_predict

    return forest_predict(model.params, X)


# ---------------------------------------------------------------------------
# serialization


def predictor_to_dict(model: FittedPredictor) -> dict[str, Any]:
    return {
        "version": SERIAL_VERSION,
        "kind": model.kind,
        "group_id": model.group_id,
        "fit_scope": model.fit_scope,
        "p": model.p,
        "payload": {k: v.tolist() for k, v in model.params.items()},
        "info": model.info,
    }


def predictor_from_dict(d: dict[str, Any]) -> FittedPredictor:
    if d.get("version") != SERIAL_VERSION:
        raise ValidationError(f"unsupported predictor version {d.get('version')!r}")
    return FittedPredictor(
        d["kind"], d["payload"], int(d["p"]), int(d["group_id"]), d["fit_scope"], d.get("info", {})
    )


def predictor_to_bytes(model: FittedPredictor) -> bytes:
    return json.dumps(predictor_to_dict(model), separators=(",", ":")).encode()


def predictor_from_bytes(raw: bytes) -> FittedPredictor:
    return predictor_from_dict(json.loads(raw.decode()))

"""Least-squares (optionally ridge) regression with an unpenalized intercept."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from ..errors import NumericError, ShapeError
from .base import FittedPredictor


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0] or y.size < 1:
        raise ShapeError(f"incompatible shapes X{X.shape}, y{y.shape}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise NumericError("non-finite values in regression input")
    return X, y


def fit_linear(X, y, ridge: float = 0.0, group_id: int = 0, fit_scope: str = "full") -> FittedPredictor:
    """Minimize sum (y - b0 - x'b)^2 + ridge * |b|^2.

    Solved on centered data through the normal equations with a symmetric
    solver; when ``ridge == 0`` and the Gram matrix is singular the
    minimum-norm slope vector is returned.
    """
    X, y = _check_xy(X, y)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    yc = y - ym
    G = Xc.T @ Xc
    if ridge:
        G[np.diag_indices_from(G)] += ridge
    rhs = Xc.T @ yc
    try:
        with np.errstate(all="raise"):
            slope = scipy.linalg.solve(G, rhs, assume_a="pos", check_finite=False)
        cond_ok = np.linalg.cond(G) < 1e12
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, FloatingPointError):
        cond_ok = False
    if not cond_ok:
        slope = np.linalg.lstsq(Xc, yc, rcond=None)[0] if not ridge else np.linalg.pinv(G) @ rhs
    intercept = ym - xm @ slope
    return FittedPredictor(
        "linear", {"coef": np.concatenate([[intercept], slope])}, X.shape[1], group_id, fit_scope,
        {"ridge": float(ridge)},
    )

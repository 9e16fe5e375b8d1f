"""Column-scaled LASSO fitted by covariance-update coordinate descent.

The penalty on slope j is ``A * sqrt(log(p + 1) / n) * |X_j|_2 / sqrt(n)``,
the intercept is left unpenalized. ``p + 1`` counts the intercept column, as
in the design-matrix convention where the first column is the constant 1.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from numba import njit

from .base import FittedPredictor
from .linear import _check_xy

DEFAULT_A = 2.0
CD_TOL = 1e-8
MAX_SWEEPS = 100_000


@njit(cache=True)
def _cd_sweeps(G, c, lam, b, r, tol, max_sweeps):
    """Cyclic coordinate descent on 0.5 b'Gb - c'b + sum lam_j |b_j|.

    ``r`` holds c - G b and is updated in place together with ``b``.
    Returns the number of sweeps performed and the last scaled change.
    """
    p = c.shape[0]
    sweeps = 0
    maxdelta = 0.0
    while sweeps < max_sweeps:
        sweeps += 1
        maxdelta = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            z = r[j] + gjj * b[j]
            if z > lam[j]:
                new = (z - lam[j]) / gjj
            elif z < -lam[j]:
                new = (z + lam[j]) / gjj
            else:
                new = 0.0
            d = new - b[j]
            if d != 0.0:
                for k in range(p):
                    r[k] -= G[k, j] * d
                b[j] = new
                step = abs(d) * math.sqrt(gjj)
                if step > maxdelta:
                    maxdelta = step
        if maxdelta < tol:
            break
    return sweeps, maxdelta


def penalty_weights(X: np.ndarray, A: float) -> np.ndarray:
    n, p = X.shape
    scale = np.sqrt((X**2).sum(axis=0)) / math.sqrt(n)
    return A * math.sqrt(math.log(p + 1) / n) * scale


class _Problem:
    """Centered sufficient statistics of one design, reused across penalties."""

    def __init__(self, X, y):
        n = X.shape[0]
        self.n = n
        self.xm = X.mean(axis=0)
        self.ym = y.mean()
        Xc = X - self.xm
        yc = y - self.ym
        self.G = Xc.T @ Xc / n
        self.c = Xc.T @ yc / n
        self.yy = float(yc @ yc) / n
        self.unit = penalty_weights(X, 1.0)
        self.dead = np.flatnonzero(np.diag(self.G) <= 1e-14 * max(1.0, self.G.diagonal().max(initial=0.0)))
        self.G[self.dead, :] = 0.0
        self.G[:, self.dead] = 0.0

    def objective(self, b, lam):
        return 0.5 * (self.yy - 2 * self.c @ b + b @ self.G @ b) + lam @ np.abs(b)

    def solve(self, lam, b0=None, tol=CD_TOL, max_sweeps=MAX_SWEEPS, trace=None):
        b = np.zeros_like(self.c) if b0 is None else b0.copy()
        r = self.c - self.G @ b
        if trace is None:
            sweeps, _ = _cd_sweeps(self.G, self.c, lam, b, r, tol, max_sweeps)
            return b, sweeps
        sweeps = 0
        trace.append(self.objective(b, lam))
        while sweeps < max_sweeps:
            _, delta = _cd_sweeps(self.G, self.c, lam, b, r, tol, 1)
            sweeps += 1
            trace.append(self.objective(b, lam))
            if delta < tol:
                break
        return b, sweeps

    def coef(self, b):
        return np.concatenate([[self.ym - self.xm @ b], b])


def _a_max(prob: _Problem) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.abs(prob.c) / prob.unit
    ratio = ratio[np.isfinite(ratio)]
    return float(ratio.max()) if ratio.size else 1.0


def cv_grid(prob: _Problem, n_grid: int = 10, ratio: float | None = None) -> np.ndarray:
    """Log grid of penalty constants from the all-zero level downward.

    The default depth is 1e-3 of the top, or 1e-2 when p exceeds the sample size.
    """
    if ratio is None:
        ratio = 1e-2 if prob.n < prob.c.size else 1e-3
    top = max(_a_max(prob), 1e-12)
    return np.geomspace(top, top * ratio, n_grid)


def fit_lasso(
    X,
    y,
    penalty_constant: float = DEFAULT_A,
    cv_folds: int | None = None,
    *,
    lambdas=None,
    n_grid: int = 10,
    seed: int = 0,
    trace: list | None = None,
    group_id: int = 0,
    fit_scope: str = "full",
) -> FittedPredictor:
    """Fit the column-scaled LASSO.

    With ``cv_folds`` the penalty constant is chosen from a ``n_grid`` point
    log grid by K-fold squared prediction error and the model is refit on all
    rows. ``lambdas`` overrides the per-column penalty entirely. ``trace``,
    if given, receives the objective value after every coordinate sweep.
    """
    X, y = _check_xy(X, y)
    prob = _Problem(X, y)
    info: dict = {"warnings": []}
    if prob.dead.size:
        info["warnings"].append(f"zero-variance columns fixed at 0: {prob.dead.tolist()}")
    if lambdas is not None:
        lam = np.broadcast_to(np.asarray(lambdas, dtype=float), prob.c.shape).copy()
        A = None
    else:
        if cv_folds:
            A = _cv_select(X, y, prob, int(cv_folds), n_grid, seed)
            info["cv_folds"] = int(cv_folds)
        else:
            A = float(penalty_constant)
            if A <= math.sqrt(2):
                info["warnings"].append(f"penalty constant {A} <= sqrt(2)")
        lam = A * prob.unit
    b, sweeps = prob.solve(lam, trace=trace)
    b[prob.dead] = 0.0
    info.update(penalty_constant=A, sweeps=int(sweeps))
    for w in info["warnings"]:
        warnings.warn(w, RuntimeWarning, stacklevel=2)
    return FittedPredictor("lasso", {"coef": prob.coef(b)}, X.shape[1], group_id, fit_scope, info)


def _cv_select(X, y, prob, K, n_grid, seed) -> float:
    n = X.shape[0]
    K = max(2, min(K, n))
    grid = cv_grid(prob, n_grid)
    folds = np.random.default_rng(seed).permutation(n) % K
    err = np.zeros(grid.size)
    for k in range(K):
        tr = folds != k
        Xt, yt = X[tr], y[tr]
        sub = _Problem(Xt, yt)
        b = None
        for i, A in enumerate(grid):
            b, _ = sub.solve(A * sub.unit, b0=b)
            coef = sub.coef(b)
            resid = y[~tr] - coef[0] - X[~tr] @ coef[1:]
            err[i] += resid @ resid
    return float(grid[int(np.argmin(err))])

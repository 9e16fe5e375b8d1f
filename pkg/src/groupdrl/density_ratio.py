"""Density ratios dQ_X/dP_X^(l) through a source-vs-target logistic classifier.

By Bayes' formula the ratio equals the class-prior ratio times the posterior
odds of "target". With a logistic posterior h(x'g) the odds are exp(x'g), so

    ratio(x) = size_ratio * exp(x'g),    size_ratio = |half| / n_Q.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import TargetSample
from .errors import ShapeError, ValidationError

LINEAR_CLIP = 30.0
TRUST_BOUND = 1e3
TOL = 1e-8
# mean log-loss below this at a non-converged fit means the classes separate
SEPARATION_LOSS = 1e-3
SERIAL_VERSION = 1


@dataclass(frozen=True, eq=False)
class DensityRatioModel:
    kind: str
    gamma: np.ndarray | None = None
    size_ratio: float = 1.0
    group_id: int = 0
    fit_scope: str = "half_a"
    p: int | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("identity", "logistic"):
            raise ValidationError(f"unknown ratio kind {self.kind!r}")
        if self.kind == "logistic":
            g = np.array(self.gamma, dtype=float, copy=True)
            g.setflags(write=False)
            object.__setattr__(self, "gamma", g)
            object.__setattr__(self, "p", g.size - 1)
            if not self.size_ratio > 0:
                raise ValidationError("size_ratio must be positive")

    def __call__(self, X) -> np.ndarray:
        return eval_ratio(self, X)


def identity_ratio(group_id: int = 0, fit_scope: str = "half_a") -> DensityRatioModel:
    return DensityRatioModel("identity", group_id=group_id, fit_scope=fit_scope)


def eval_ratio(model: DensityRatioModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if (model.p or 1) == 1 else X.reshape(1, -1)
    if model.kind == "identity":
        return np.ones(X.shape[0])
    if X.shape[1] != model.p:
        raise ShapeError(f"ratio model expects {model.p} columns, got {X.shape[1]}")
    z = np.clip(model.gamma[0] + X @ model.gamma[1:], -LINEAR_CLIP, LINEAR_CLIP)
    return model.size_ratio * np.exp(z)


def _loss(z, G):
    return float(np.mean(np.logaddexp(0.0, z) - G * z))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _newton(Z, G, max_iter):
    N, d = Z.shape
    g = np.zeros(d)
    z = Z @ g
    loss = _loss(z, G)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pr = _sigmoid(z)
        grad = Z.T @ (pr - G) / N
        H = (Z * (pr * (1 - pr))[:, None]).T @ Z / N
        H[np.diag_indices(d)] += 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            g_new = g - t * step
            z_new = Z @ g_new
            loss_new = _loss(z_new, G)
            if loss_new <= loss + 1e-12 or t < 1e-10:
                break
            t *= 0.5
        delta = np.max(np.abs(g_new - g))
        g, z, loss = g_new, z_new, loss_new
        if delta < TOL:
            converged = True
            break
        if np.linalg.norm(g) > TRUST_BOUND:
            break
    return g, it, converged


def _fista(Z, G, lam_w, max_iter):
    N, d = Z.shape
    lip = np.linalg.eigvalsh(Z.T @ Z / N)[-1] / 4.0
    step = 1.0 / lip
    g = np.zeros(d)
    yk = g.copy()
    tk = 1.0
    obj_prev = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = Z.T @ (_sigmoid(Z @ yk) - G) / N
        v = yk - step * grad
        g_new = np.sign(v) * np.maximum(np.abs(v) - step * lam_w, 0.0)
        obj = _loss(Z @ g_new, G) + lam_w @ np.abs(g_new)
        if obj > obj_prev:
            # adaptive restart
            yk = g.copy()
            tk = 1.0
            continue
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * tk * tk))
        yk = g_new + (tk - 1) / t_new * (g_new - g)
        delta = np.max(np.abs(g_new - g))
        g, tk, obj_prev = g_new, t_new, obj
        if delta < TOL:
            converged = True
            break
    return g, it, converged


def fit_bayes_logistic(
    group_half,
    target: TargetSample,
    l1_penalty: float = 0.0,
    max_iter: int = 100,
    group_id: int = 0,
    fit_scope: str = "half_a",
) -> DensityRatioModel:
    """Fit the source-vs-target logistic classifier and wrap it as a ratio.

    Source rows get label 0 and target rows label 1. ``l1_penalty == 0`` uses
    damped Newton (IRLS); otherwise FISTA on the column-scaled L1 problem with
    lambda = l1_penalty * sqrt(log(p + 1) / N).
    """
    Xs = np.asarray(group_half, dtype=float)
    if Xs.ndim == 1:
        Xs = Xs.reshape(-1, 1)
    Xq = target.covariates
    if Xs.shape[0] == 0:
        raise ValidationError("empty source half")
    if Xs.shape[1] != Xq.shape[1]:
        raise ShapeError(f"source half has p={Xs.shape[1]}, target p={Xq.shape[1]}")
    if l1_penalty < 0:
        raise ValidationError("l1_penalty must be nonnegative")
    X = np.vstack([Xs, Xq])
    N, p = X.shape
    Z = np.hstack([np.ones((N, 1)), X])
    G = np.concatenate([np.zeros(Xs.shape[0]), np.ones(Xq.shape[0])])
    info: dict = {"l1_penalty": float(l1_penalty)}
    if l1_penalty == 0:
        g, it, conv = _newton(Z, G, max_iter)
    else:
        lam = l1_penalty * math.sqrt(math.log(p + 1) / N)
        w = np.sqrt((Z**2).sum(axis=0) / N)
        w[0] = 0.0
        g, it, conv = _fista(Z, G, lam * w, max(max_iter, 5000))
    norm = float(np.linalg.norm(g))
    if not conv:
        separable = _loss(Z @ g, G) < SEPARATION_LOSS
        what = f"classes look separable (|gamma|={norm:.3g})" if separable else "classifier did not converge"
        warnings.warn(f"group {group_id} {fit_scope}: {what}", RuntimeWarning, stacklevel=2)
        info["separation"] = bool(separable)
        if norm > TRUST_BOUND:
            g = g * (TRUST_BOUND / norm)
    info.update(iterations=int(it), converged=bool(conv))
    return DensityRatioModel(
        "logistic", g, Xs.shape[0] / Xq.shape[0], group_id, fit_scope, info=info
    )


def ratio_to_dict(model: DensityRatioModel) -> dict:
    return {
        "version": SERIAL_VERSION,
        "kind": model.kind,
        "gamma": None if model.gamma is None else model.gamma.tolist(),
        "size_ratio": model.size_ratio,
        "group_id": model.group_id,
        "fit_scope": model.fit_scope,
        "info": model.info,
    }


def ratio_from_dict(d: dict) -> DensityRatioModel:
    if d.get("version") != SERIAL_VERSION:
        raise ValidationError(f"unsupported ratio model version {d.get('version')!r}")
    return DensityRatioModel(
        d["kind"], d["gamma"], float(d["size_ratio"]), int(d["group_id"]), d["fit_scope"],
        info=d.get("info", {}),
    )


def ratio_to_bytes(model: DensityRatioModel) -> bytes:
    return json.dumps(ratio_to_dict(model), separators=(",", ":")).encode()


def ratio_from_bytes(raw: bytes) -> DensityRatioModel:
    return ratio_from_dict(json.loads(raw.decode()))

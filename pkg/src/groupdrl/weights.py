"""Quadratic program min_{q in H} q' Gamma q over subsets H of the simplex."""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import MixtureSpec
from .errors import ConvergenceError, IndefiniteMatrixError, ShapeError, ValidationError
from .gamma import GammaMatrix

PGD_TOL = 1e-10
PGD_MAX_ITER = 100_000
DYKSTRA_TOL = 1e-15
DYKSTRA_MAX_SWEEPS = 10_000
DEGENERATE_DENOM = 1e-14
FLAT_EIG = 1e-10
H_KINDS = ("full_simplex", "l2_ball", "singleton")


@dataclass(frozen=True, eq=False)
class UncertaintySet:
    kind: str = "full_simplex"
    L: int | None = None
    center: MixtureSpec | None = None
    rho: float = 0.0
    scaled: bool = True
    point: MixtureSpec | None = None

    def __post_init__(self):
        if self.kind not in H_KINDS:
            raise ValidationError(f"unknown uncertainty set {self.kind!r}")
        if self.kind == "l2_ball":
            if self.center is None:
                raise ValidationError("l2_ball needs a center")
            c = self.center if isinstance(self.center, MixtureSpec) else MixtureSpec(self.center)
            object.__setattr__(self, "center", c)
            object.__setattr__(self, "L", len(c))
            if not (self.rho >= 0 and math.isfinite(self.rho)):
                raise ValidationError("rho must be a nonnegative finite number")
        elif self.kind == "singleton":
            if self.point is None:
                raise ValidationError("singleton needs a point")
            q = self.point if isinstance(self.point, MixtureSpec) else MixtureSpec(self.point)
            object.__setattr__(self, "point", q)
            object.__setattr__(self, "L", len(q))

    @classmethod
    def full_simplex(cls, L: int | None = None) -> "UncertaintySet":
        return cls("full_simplex", L)

    @classmethod
    def l2_ball(cls, center, rho: float, scaled: bool = True) -> "UncertaintySet":
        return cls("l2_ball", center=center, rho=float(rho), scaled=scaled)

    @classmethod
    def singleton(cls, q) -> "UncertaintySet":
        return cls("singleton", point=q)

    @property
    def radius(self) -> float:
        """Euclidean radius; ``rho * sqrt(L)`` when scaled."""
        if self.kind != "l2_ball":
            return math.inf if self.kind == "full_simplex" else 0.0
        return self.rho * math.sqrt(self.L) if self.scaled else self.rho

    def check_dim(self, L: int) -> None:
        if self.L is not None and self.L != L:
            raise ShapeError(f"uncertainty set has L={self.L}, problem has L={L}")

    def contains(self, q, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        if q.min() < -tol or abs(q.sum() - 1) > tol:
            return False
        if self.kind == "l2_ball":
            return bool(np.linalg.norm(q - np.asarray(self.center)) <= self.radius + tol)
        if self.kind == "singleton":
            return bool(np.max(np.abs(q - np.asarray(self.point))) <= tol)
        return True

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == "full_simplex":
            d["L"] = self.L
        elif self.kind == "l2_ball":
            d.update(center=self.center.tolist(), rho=self.rho, scaled=self.scaled)
        else:
            d["q"] = self.point.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintySet":
        kind = d.get("kind")
        if kind == "full_simplex":
            return cls.full_simplex(d.get("L"))
        if kind == "l2_ball":
            return cls.l2_ball(d["center"], d["rho"], d.get("scaled", True))
        if kind == "singleton":
            return cls.singleton(d["q"])
        raise ValidationError(f"unknown uncertainty set {kind!r}")


def diameter(H: UncertaintySet, L: int) -> float:
    """Upper bound on the Euclidean diameter of H (exact for the full simplex)."""
    if H.kind == "singleton":
        return 0.0
    simplex = math.sqrt(2.0) if L > 1 else 0.0
    if H.kind == "full_simplex":
        return simplex
    return min(2.0 * H.radius, simplex)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0 or not np.isfinite(v).all():
        raise ValidationError("project_simplex needs a finite non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def _project_ball(v, c, r):
    d = v - c
    nrm = np.linalg.norm(d)
    return v if nrm <= r else c + d * (r / nrm)


def project_H(v, H: UncertaintySet) -> np.ndarray:
    """Euclidean projection onto H; Dykstra's algorithm for ball intersect simplex."""
    v = np.asarray(v, dtype=float)
    H.check_dim(v.size)
    if H.kind == "singleton":
        return np.array(H.point, dtype=float)
    q = project_simplex(v)
    if H.kind == "full_simplex":
        return q
    c = np.array(H.center, dtype=float)
    r = H.radius
    if np.linalg.norm(q - c) <= r:
        return q
    x = v.copy()
    p_inc = np.zeros_like(v)
    q_inc = np.zeros_like(v)
    for _ in range(DYKSTRA_MAX_SWEEPS):
        y = _project_ball(x + p_inc, c, r)
        p_inc = x + p_inc - y
        x_new = project_simplex(y + q_inc)
        q_inc = y + q_inc - x_new
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change <= DYKSTRA_TOL:
            break
    else:
        if change > 1e-12:
            raise ConvergenceError(f"Dykstra projection did not converge (last change {change:.2e})")
    # x is on the simplex; pulling toward the in-simplex center keeps it there
    dist = np.linalg.norm(x - c)
    if dist > r:
        x = c + (x - c) * (r / dist)
    return x


@dataclass(frozen=True, eq=False)
class WeightSolution:
    q: MixtureSpec
    objective: float
    iterations: int
    converged: bool
    active_set: tuple = ()
    flat: bool = False
    kkt_residual: float = 0.0
    method: str = "pgd"
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "q": self.q.tolist(),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "active_set": list(self.active_set),
            "flat": self.flat,
            "kkt_residual": self.kkt_residual,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSolution":
        return cls(MixtureSpec(d["q"]), d["objective"], d["iterations"], d["converged"],
                   tuple(d.get("active_set", ())), d.get("flat", False), d.get("kkt_residual", 0.0),
                   d.get("method", "pgd"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _as_mixture(q: np.ndarray) -> MixtureSpec:
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    if abs(q.sum() - 1.0) > 1e-15:
        q = q / q.sum()
    return MixtureSpec(q)


def _gradient_mapping(G, q, H, step):
    g = 2.0 * G @ q
    return float(np.linalg.norm(q - project_H(q - step * g, H)) / step)


def _face_flat(G, q) -> bool:
    support = np.flatnonzero(q > 1e-12)
    if support.size < 2:
        return False
    S = G[np.ix_(support, support)]
    m = support.size
    # orthonormal basis of {d : sum d = 0} in R^m
    basis = np.linalg.qr(np.eye(m) - 1.0 / m)[0][:, : m - 1]
    ev = np.linalg.eigvalsh(basis.T @ (2.0 * S) @ basis)
    return bool(ev.min() < FLAT_EIG)


def closed_form_two(G) -> float:
    """Minimizer q1 of q'Gq over the 2-simplex."""
    denom = G[0, 0] + G[1, 1] - 2.0 * G[0, 1]
    if denom <= DEGENERATE_DENOM:
        return 0.5
    return float(min(max((G[1, 1] - G[0, 1]) / denom, 0.0), 1.0))


def solve_weights(gamma, H: UncertaintySet | None = None, method: str = "auto") -> WeightSolution:
    """Minimize q' Gamma q over H.

    ``method="auto"`` uses the closed form for L = 2 on the full simplex and
    projected gradient descent otherwise; ``"pgd"`` forces the iterative path.
    """
    G = np.asarray(gamma.values if isinstance(gamma, GammaMatrix) else gamma, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ShapeError("Gamma must be square")
    if not np.isfinite(G).all():
        raise ValidationError("Gamma has non-finite entries")
    L = G.shape[0]
    H = H or UncertaintySet.full_simplex(L)
    H.check_dim(L)
    G = 0.5 * (G + G.T)
    evals = np.linalg.eigvalsh(G)
    scale = max(1.0, abs(evals[-1]))
    if evals[0] < -1e-12 * scale:
        raise IndefiniteMatrixError(
            f"Gamma has eigenvalue {evals[0]:.3e} < 0; call psd_repair before solve_weights"
        )
    lmax = max(evals[-1], 0.0)
    step = 1.0 / (2.0 * lmax + 1e-300) if lmax > 0 else 1.0

    iters = 0
    converged = True
    if H.kind == "singleton":
        q = np.array(H.point, dtype=float)
        used = "fixed"
    elif L == 1:
        q = np.ones(1)
        used = "fixed"
    elif method == "auto" and L == 2 and H.kind == "full_simplex":
        q1 = closed_form_two(G)
        q = np.array([q1, 1.0 - q1])
        used = "closed_form"
    elif method in ("auto", "pgd"):
        q = project_H(np.full(L, 1.0 / L), H)
        converged = False
        for iters in range(1, PGD_MAX_ITER + 1):
            q_new = project_H(q - step * (2.0 * G @ q), H)
            change = np.max(np.abs(q_new - q))
            q = q_new
            if change < PGD_TOL:
                converged = True
                break
        used = "pgd"
    else:
        raise ValidationError(f"unknown method {method!r}")

    mix = H.point if H.kind == "singleton" else _as_mixture(q)
    qa = np.asarray(mix)
    return WeightSolution(
        q=mix,
        objective=float(qa @ G @ qa),
        iterations=int(iters),
        converged=converged,
        active_set=tuple(int(i) for i in np.flatnonzero(qa > 1e-12)),
        flat=_face_flat(G, qa) if H.kind != "singleton" else False,
        kkt_residual=_gradient_mapping(G, qa, H, step) if H.kind != "singleton" else 0.0,
        method=used,
    )


def mesh_points(L: int, mesh: float) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``mesh``."""
    m = int(round(1.0 / mesh))
    if abs(m * mesh - 1.0) > 1e-9:
        raise ValidationError("mesh must divide 1")
    pts = [c for c in itertools.product(range(m + 1), repeat=L - 1) if sum(c) <= m]
    arr = np.array([list(c) + [m - sum(c)] for c in pts], dtype=float) / m
    return arr


def H_mesh(H: UncertaintySet, L: int, mesh: float) -> np.ndarray:
    if H.kind == "singleton":
        return np.array(H.point, dtype=float)[None, :]
    pts = mesh_points(L, mesh)
    if H.kind == "l2_ball":
        pts = pts[np.linalg.norm(pts - np.asarray(H.center), axis=1) <= H.radius + 1e-12]
        if pts.shape[0] == 0:
            pts = np.asarray(H.center, dtype=float)[None, :]
    return pts


def group_rewards(F: np.ndarray, masses: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Reward of each aggregate (rows of Q) under each group's conditional mean.

    F is L x m (model values on the support), masses sum to 1. Entry (i, l) is
    sum_j m_j (2 F[l, j] f_i(x_j) - f_i(x_j)^2) with f_i = sum_k Q[i, k] F[k].
    """
    agg = Q @ F
    return (2.0 * agg * masses) @ F.T - ((agg**2) @ masses)[:, None]


def minimax_oracle(
    models: Sequence[Callable],
    target_points,
    masses=None,
    H: UncertaintySet | None = None,
    mesh: float = 0.01,
    tol: float | None = None,
) -> MixtureSpec:
    """Brute-force max over a q-mesh of the worst-case reward over H.

    Exhaustive; intended as an independent check of ``solve_weights``.
    """
    L = len(models)
    if L > 3:
        raise ValidationError("minimax_oracle supports L <= 3")
    if tol is not None and mesh > tol:
        warnings.warn(f"mesh {mesh} is coarser than requested tolerance {tol}", RuntimeWarning, stacklevel=2)
    X = np.asarray(target_points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    m = np.full(X.shape[0], 1.0 / X.shape[0]) if masses is None else np.asarray(masses, dtype=float)
    m = m / m.sum()
    F = np.vstack([np.asarray(f(X), dtype=float).reshape(-1) for f in models])
    H = H or UncertaintySet.full_simplex(L)
    cand = H_mesh(H, L, mesh)
    R = group_rewards(F, m, cand)  # candidates x L
    adversary = np.eye(L) if H.kind == "full_simplex" else cand
    worst = (R @ adversary.T).min(axis=1)
    return MixtureSpec(cand[int(np.argmax(worst))])

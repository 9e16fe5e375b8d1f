"""Rewards, worst-case evaluation and numerical checks of the reward bound."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import MixtureSpec
from .errors import ShapeError, ValidationError
from .weights import H_mesh, UncertaintySet


@dataclass(frozen=True, eq=False)
class RewardReport:
    reward: float
    n_eval: int
    per_group_rewards: np.ndarray | None = None
    worst_mixture: MixtureSpec | None = None

    def to_dict(self) -> dict:
        d = {"reward": self.reward, "n_eval": self.n_eval}
        if self.per_group_rewards is not None:
            d["per_group_rewards"] = np.asarray(self.per_group_rewards).tolist()
        if self.worst_mixture is not None:
            d["worst_mixture"] = self.worst_mixture.tolist()
        return d


def empirical_reward(predictions, outcomes) -> RewardReport:
    """mean(y^2 - (y - f)^2)."""
    f = np.asarray(predictions, dtype=float).reshape(-1)
    y = np.asarray(outcomes, dtype=float).reshape(-1)
    if f.size != y.size:
        raise ShapeError(f"{f.size} predictions for {y.size} outcomes")
    if y.size == 0:
        raise ValidationError("empty evaluation set")
    return RewardReport(float(np.mean(y**2 - (y - f) ** 2)), int(y.size))


def _eval_sets(groups_test):
    out = []
    for g in groups_test:
        if hasattr(g, "covariates"):
            out.append((g.covariates, g.outcomes))
        else:
            X, y = g
            out.append((np.asarray(X, dtype=float), np.asarray(y, dtype=float)))
    if not out:
        raise ValidationError("no evaluation sets")
    return out


def per_group_rewards(model: Callable, groups_test) -> np.ndarray:
    return np.array([empirical_reward(model(X), y).reward for X, y in _eval_sets(groups_test)])


def worst_group_reward(model: Callable, groups_test) -> RewardReport:
    """Minimum over groups of the empirical reward (the worst simplex vertex)."""
    sets = _eval_sets(groups_test)
    r = np.array([empirical_reward(model(X), y).reward for X, y in sets])
    k = int(np.argmin(r))
    return RewardReport(float(r[k]), int(sum(y.size for _, y in sets)), r, MixtureSpec(np.eye(r.size)[k]))


def worst_case_reward(rewards, H: UncertaintySet | None = None, mesh: float = 0.01) -> RewardReport:
    """min over q in H of q . rewards.

    The full simplex is handled exactly at its vertices; constrained sets are
    searched over a mesh of the simplex restricted to H.
    """
    r = np.asarray(rewards, dtype=float)
    L = r.size
    if H is None or H.kind == "full_simplex":
        k = int(np.argmin(r))
        return RewardReport(float(r[k]), 0, r, MixtureSpec(np.eye(L)[k]))
    pts = H_mesh(H, L, mesh)
    vals = pts @ r
    k = int(np.argmin(vals))
    return RewardReport(float(vals[k]), 0, r, MixtureSpec(pts[k]))


def reward_curve(
    models: Mapping[str, Callable],
    generator: Callable,
    q_tar_grid: Sequence,
    seed: int = 0,
) -> list[dict]:
    """Reward of every model on a fresh test set drawn at each grid mixture.

    ``generator(q_tar, rng)`` returns ``(X, y)``; grid point i uses the
    generator seeded with ``seed + i``.
    """
    rows = []
    for i, q in enumerate(q_tar_grid):
        q = q if isinstance(q, MixtureSpec) else MixtureSpec(q)
        X, y = generator(q, np.random.default_rng(seed + i))
        for name, f in models.items():
            rep = empirical_reward(f(X), y)
            rows.append({"grid_index": i, "q_tar": q.tolist(), "method": name, "reward": rep.reward})
    return rows


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    lhs: float
    rhs: float
    slack: float
    mc_error: float


def reward_diff_bound_check(
    f_hat: Callable,
    f_star: Callable,
    f_Q: Callable,
    target_eval,
    outcomes=None,
) -> BoundCheck:
    """Compare |R(f_hat) - R(f_star)| with 2 |f_Q - f*| |f_hat - f*| + |f_hat - f*|^2.

    Rewards use ``outcomes`` when given and the exact conditional mean ``f_Q``
    otherwise; norms are sample L2 norms over ``target_eval``.
    """
    X = np.asarray(target_eval, dtype=float)
    fh, fs, fq = (np.asarray(g(X), dtype=float) for g in (f_hat, f_star, f_Q))
    y = fq if outcomes is None else np.asarray(outcomes, dtype=float)
    diff_pts = (2 * y * fh - fh**2) - (2 * y * fs - fs**2)
    lhs = abs(float(np.mean(diff_pts)))
    d = fh - fs
    nd = math.sqrt(float(np.mean(d**2)))
    rhs = 2.0 * math.sqrt(float(np.mean((fq - fs) ** 2))) * nd + nd**2
    mc = float(np.std(diff_pts, ddof=1) / math.sqrt(X.shape[0])) if X.shape[0] > 1 else 0.0
    slack = rhs + 3.0 * mc - lhs
    return BoundCheck(bool(lhs <= rhs + 3.0 * mc), lhs, rhs, slack, mc)


def mean_and_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def write_rows_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        open(path, "w").close()
        return
    cols = list(rows[0].keys())
    for r in rows[1:]:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in cols})


def _cell(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return ";".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return v

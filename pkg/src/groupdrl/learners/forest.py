"""Bagged CART regression forests with numba kernels.

Splits maximize the variance reduction; ties go to the lowest feature index
and then the lowest threshold. Every tree draws its bootstrap sample and its
per-node feature subsets from its own seed, so a forest is a deterministic
function of (X, y, hyperparameters, seed).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from ..errors import ValidationError
from .base import FittedPredictor
from .linear import _check_xy

DEFAULT_TREES = 200
DEFAULT_MIN_LEAF = 5


def default_mtry(p: int) -> int:
    return max(1, math.ceil(p / 3))


@njit(cache=True)
def _build_tree(Xb, yb, mtry, min_leaf, seed, feature, threshold, left, right, value):
    """Grow one tree on the (bootstrap) sample ``Xb, yb``.

    Each feature keeps its own presorted list of sample positions; a split
    stably partitions every list, so sorted order never has to be recomputed.
    """
    np.random.seed(seed)
    n_total, p = Xb.shape
    order = np.empty((p, n_total), dtype=np.int64)
    for f in range(p):
        order[f] = np.argsort(Xb[:, f], kind="mergesort")
    feats = np.arange(p)
    goes_left = np.zeros(n_total, dtype=np.bool_)
    buf = np.empty(n_total, dtype=np.int64)

    stack = np.empty((2 * n_total + 2, 3), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n_total
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        n = e - s
        total = 0.0
        ymin = yb[order[0, s]]
        ymax = ymin
        for i in range(s, e):
            v = yb[order[0, i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        feature[node] = -1
        left[node] = -1
        right[node] = -1
        value[node] = total / n if ymin != ymax else ymin
        if n < 2 * min_leaf or ymin == ymax:
            continue

        # mtry distinct features by partial Fisher-Yates, scanned in index order
        for i in range(mtry):
            j = i + np.random.randint(p - i)
            tmp = feats[i]
            feats[i] = feats[j]
            feats[j] = tmp
        chosen = np.sort(feats[:mtry].copy())

        parent = total * total / n
        best_gain = parent + 1e-12 * (abs(parent) + 1.0)
        best_f = -1
        best_t = 0.0
        for fi in range(mtry):
            f = chosen[fi]
            csum = 0.0
            for i in range(1, n):
                csum += yb[order[f, s + i - 1]]
                if i < min_leaf or n - i < min_leaf:
                    continue
                lo = Xb[order[f, s + i - 1], f]
                hi = Xb[order[f, s + i], f]
                if lo == hi:
                    continue
                rsum = total - csum
                gain = csum * csum / i + rsum * rsum / (n - i)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (lo + hi)
                    if t >= hi:
                        t = lo
                    best_t = t
        if best_f < 0:
            continue

        nl = 0
        for i in range(s, e):
            pos = order[best_f, i]
            flag = Xb[pos, best_f] <= best_t
            goes_left[pos] = flag
            if flag:
                nl += 1
        for f in range(p):
            a = 0
            b = nl
            for i in range(s, e):
                pos = order[f, i]
                if goes_left[pos]:
                    buf[a] = pos
                    a += 1
                else:
                    buf[b] = pos
                    b += 1
            for i in range(n):
                order[f, s + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_t
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # right pushed first so the left subtree is laid out first
        stack[sp, 0] = rnode
        stack[sp, 1] = s + nl
        stack[sp, 2] = e
        sp += 1
        stack[sp, 0] = lnode
        stack[sp, 1] = s
        stack[sp, 2] = s + nl
        sp += 1
    return n_nodes


@njit(cache=True)
def _predict(X, feature, threshold, left, right, value, roots):
    n = X.shape[0]
    T = roots.shape[0]
    acc = np.zeros(n)
    for t in range(T):
        root = roots[t]
        for i in range(n):
            node = root
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc[i] += value[node]
    return acc / T


def forest_predict(params: dict, X: np.ndarray) -> np.ndarray:
    return _predict(
        np.ascontiguousarray(X, dtype=float),
        params["feature"],
        params["threshold"],
        params["left"],
        params["right"],
        params["value"],
        params["roots"],
    )


def tree_seeds(seed: int, n_trees: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n_trees, dtype=np.uint32).astype(np.int64)


def _grow(X, y, n_trees, mtry, min_leaf, seed, bootstrap):
    n = X.shape[0]
    seeds = tree_seeds(seed, n_trees)
    parts = {k: [] for k in ("feature", "threshold", "left", "right", "value")}
    roots = np.empty(n_trees, dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=bool) if bootstrap else None
    offset = 0
    for t, ts in enumerate(seeds):
        if bootstrap:
            samples = np.random.default_rng(ts).integers(0, n, n).astype(np.int64)
            inbag[t, samples] = True
        else:
            samples = np.arange(n, dtype=np.int64)
        cap = 2 * n + 1
        feat = np.empty(cap, dtype=np.int64)
        thr = np.zeros(cap)
        lft = np.empty(cap, dtype=np.int64)
        rgt = np.empty(cap, dtype=np.int64)
        val = np.empty(cap)
        Xb = np.ascontiguousarray(X[samples])
        m = _build_tree(Xb, y[samples], mtry, min_leaf, int(ts), feat, thr, lft, rgt, val)
        lft = lft[:m].copy()
        rgt = rgt[:m].copy()
        lft[lft >= 0] += offset
        rgt[rgt >= 0] += offset
        parts["feature"].append(feat[:m])
        parts["threshold"].append(thr[:m])
        parts["left"].append(lft)
        parts["right"].append(rgt)
        parts["value"].append(val[:m])
        roots[t] = offset
        offset += m
    params = {k: np.concatenate(v) for k, v in parts.items()}
    params["roots"] = roots
    return params, inbag


def fit_forest(
    X,
    y,
    n_trees: int = DEFAULT_TREES,
    mtry: int | None = None,
    min_leaf: int = DEFAULT_MIN_LEAF,
    seed: int = 0,
    *,
    bootstrap: bool = True,
    group_id: int = 0,
    fit_scope: str = "full",
) -> FittedPredictor:
    """Fit a random forest of variance-reduction regression trees."""
    X, y = _check_xy(X, y)
    n, p = X.shape
    mtry = default_mtry(p) if mtry is None else int(mtry)
    if n_trees < 1:
        raise ValidationError("n_trees must be >= 1")
    if not 1 <= mtry <= p:
        raise ValidationError(f"mtry must lie in [1, {p}], got {mtry}")
    if min_leaf < 1 or min_leaf > n:
        raise ValidationError(f"min_leaf={min_leaf} is invalid for n={n}")
    X = np.ascontiguousarray(X)
    params, _ = _grow(X, y, int(n_trees), mtry, int(min_leaf), int(seed), bootstrap)
    info = {"n_trees": int(n_trees), "mtry": mtry, "min_leaf": int(min_leaf), "seed": int(seed),
            "bootstrap": bool(bootstrap)}
    return FittedPredictor("forest", params, p, group_id, fit_scope, info)


def oob_error(X, y, n_trees, mtry, min_leaf, seed) -> float:
    """Out-of-bag mean squared error of a bootstrap forest."""
    X, y = _check_xy(X, y)
    X = np.ascontiguousarray(X)
    params, inbag = _grow(X, y, n_trees, mtry, min_leaf, seed, True)
    sums = np.zeros(X.shape[0])
    counts = np.zeros(X.shape[0])
    roots = params["roots"]
    for t in range(roots.size):
        oob = ~inbag[t]
        if not oob.any():
            continue
        single = dict(params, roots=roots[t : t + 1])
        sums[oob] += forest_predict(single, X[oob])
        counts[oob] += 1
    ok = counts > 0
    return float(np.mean((y[ok] - sums[ok] / counts[ok]) ** 2)) if ok.any() else float("inf")


def tune_forest(X, y, n_trees: int = DEFAULT_TREES, seed: int = 0, **kw) -> FittedPredictor:
    """Pick mtry and min_leaf on a small grid by out-of-bag error, then refit."""
    X, y = _check_xy(X, y)
    p = X.shape[1]
    mtrys = sorted({default_mtry(p), max(1, math.ceil(p / 2)), p})
    best = None
    for m in mtrys:
        for leaf in (1, 5, 10):
            if leaf > X.shape[0]:
                continue
            err = oob_error(X, y, n_trees, m, leaf, seed)
            if best is None or err < best[0]:
                best = (err, m, leaf)
    model = fit_forest(X, y, n_trees, best[1], best[2], seed, **kw)
    model.info["oob_mse"] = best[0]
    return model

"""Source groups, target samples, mixture weights and CSV ingestion."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InsufficientDataError,
    ParseError,
    SchemaError,
    ShapeError,
    ValidationError,
)

# groups smaller than this are rejected at ingestion
MIN_GROUP_SIZE = 3


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def deterministic_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """First floor(n/2) rows form half A, the remainder half B."""
    half = n // 2
    return np.arange(half), np.arange(half, n)


@dataclass(frozen=True, eq=False)
class SourceGroup:
    group_id: int
    covariates: np.ndarray
    outcomes: np.ndarray
    split_a: np.ndarray = None
    split_b: np.ndarray = None
    label: object = None

    def __post_init__(self):
        X = _frozen(self.covariates)
        y = _frozen(self.outcomes)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise ShapeError(
                f"group {self.group_id}: covariates {X.shape} and outcomes {y.shape} disagree"
            )
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise ValidationError(f"group {self.group_id}: non-finite values")
        n = X.shape[0]
        if self.split_a is None or self.split_b is None:
            a, b = deterministic_split(n)
        else:
            a = np.asarray(self.split_a, dtype=np.int64)
            b = np.asarray(self.split_b, dtype=np.int64)
        _check_partition(a, b, n, self.group_id)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "split_a", _frozen(a, np.int64))
        object.__setattr__(self, "split_b", _frozen(b, np.int64))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def half(self, scope: str) -> tuple[np.ndarray, np.ndarray]:
        """(X, y) rows of half 'a' or 'b'."""
        idx = self.split_a if scope in ("a", "half_a") else self.split_b
        return self.covariates[idx], self.outcomes[idx]


def _check_partition(a: np.ndarray, b: np.ndarray, n: int, gid) -> None:
    if a.size + b.size != n:
        raise ValidationError(f"group {gid}: split sizes do not cover {n} rows")
    both = np.concatenate([a, b])
    if both.size and (both.min() < 0 or both.max() >= n):
        raise ValidationError(f"group {gid}: split index out of range")
    if np.unique(both).size != n:
        raise ValidationError(f"group {gid}: splits overlap")


@dataclass(frozen=True, eq=False)
class TargetSample:
    covariates: np.ndarray

    def __post_init__(self):
        X = _frozen(self.covariates)
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1))
        if X.ndim != 2 or X.shape[0] == 0:
            raise ShapeError(f"target covariates must be a non-empty matrix, got {X.shape}")
        if not np.isfinite(X).all():
            raise ValidationError("target covariates contain non-finite values")
        object.__setattr__(self, "covariates", X)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """A point of the probability simplex."""

    weights: np.ndarray = field()

    def __post_init__(self):
        w = _frozen(np.ravel(self.weights))
        if w.size == 0 or not np.isfinite(w).all():
            raise ValidationError("mixture weights must be a non-empty finite vector")
        if (w < 0).any():
            raise ValidationError(f"mixture weights must be nonnegative: {w}")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"mixture weights must sum to 1 (sum={w.sum()!r})")
        object.__setattr__(self, "weights", w)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self) -> int:
        return self.weights.size

    def __iter__(self):
        return iter(self.weights.tolist())

    def __getitem__(self, k) -> float:
        return float(self.weights[k])

    def tolist(self) -> list[float]:
        return self.weights.tolist()

    @classmethod
    def uniform(cls, L: int) -> "MixtureSpec":
        return cls(np.full(L, 1.0 / L))


def source_mixture(groups: Sequence[SourceGroup]) -> MixtureSpec:
    """q_sou = (n_1/N, ..., n_L/N)."""
    n = np.array([g.n for g in groups], dtype=float)
    w = n / n.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return MixtureSpec(w)


def check_common_dimension(groups: Sequence[SourceGroup], target: TargetSample | None = None) -> int:
    if not groups:
        raise ValidationError("at least one source group is required")
    p = groups[0].p
    for g in groups:
        if g.p != p:
            raise ShapeError(f"group {g.group_id} has p={g.p}, expected {p}")
    if target is not None and target.p != p:
        raise ShapeError(f"target has p={target.p}, sources have p={p}")
    return p


def make_random_split(group: SourceGroup, seed: int) -> SourceGroup:
    """Copy of ``group`` whose half A is a uniformly random floor(n/2)-subset."""
    if group.n < MIN_GROUP_SIZE:
        raise InsufficientDataError(f"group {group.group_id}: n={group.n} < {MIN_GROUP_SIZE}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(group.n)
    half = group.n // 2
    return SourceGroup(
        group.group_id,
        group.covariates,
        group.outcomes,
        np.sort(perm[:half]),
        np.sort(perm[half:]),
        label=group.label,
    )


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ParseError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    return header, body


def _to_float(cell: str, line: int, column: str, path) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"{path}: non-numeric cell {cell!r} at line {line}, column '{column}'") from None
    if not math.isfinite(v):
        raise ParseError(f"{path}: non-finite cell {cell!r} at line {line}, column '{column}'")
    return v


def _numeric_matrix(header, body, columns, path) -> np.ndarray:
    idx = [header.index(c) for c in columns]
    out = np.empty((len(body), len(idx)))
    for i, r in enumerate(body):
        for j, k in enumerate(idx):
            out[i, j] = _to_float(r[k].strip(), i + 2, header[k], path)
    return out


def ingest_source_csv(
    path, group_column: str = "group", outcome_column: str = "y"
) -> list[SourceGroup]:
    """Read a labeled multi-group CSV into one SourceGroup per distinct label.

    Labels are remapped to 1..L in sorted label order; the original label is
    kept on ``SourceGroup.label``. Row order within a group is preserved and
    the deterministic half-split is assigned.
    """
    header, body = _read_rows(path)
    for col in (group_column, outcome_column):
        if col not in header:
            raise SchemaError(f"{path}: missing column '{col}'")
    if not body:
        raise ParseError(f"{path}: no data rows")
    features = [c for c in header if c not in (group_column, outcome_column)]
    if not features:
        raise SchemaError(f"{path}: no covariate columns")
    gk = header.index(group_column)
    labels = []
    for i, r in enumerate(body):
        v = _to_float(r[gk].strip(), i + 2, group_column, path)
        if v != int(v):
            raise ParseError(f"{path}: group label {r[gk]!r} at line {i + 2} is not an integer")
        labels.append(int(v))
    X = _numeric_matrix(header, body, features, path)
    y = _numeric_matrix(header, body, [outcome_column], path)[:, 0]
    labels = np.array(labels)
    groups = []
    for gid, lab in enumerate(sorted(set(labels.tolist())), start=1):
        rows = np.flatnonzero(labels == lab)
        if rows.size < MIN_GROUP_SIZE:
            raise InsufficientDataError(
                f"{path}: group {lab} has {rows.size} rows, need at least {MIN_GROUP_SIZE}"
            )
        groups.append(SourceGroup(gid, X[rows], y[rows], label=lab))
    return groups


def ingest_target_csv(path, expected_p: int | None = None, drop_columns: Sequence[str] = ()) -> TargetSample:
    header, body = _read_rows(path)
    if not body:
        raise ParseError(f"{path}: no data rows")
    cols = [c for c in header if c not in drop_columns]
    X = _numeric_matrix(header, body, cols, path)
    if expected_p is not None and X.shape[1] != expected_p:
        raise ShapeError(f"{path}: {X.shape[1]} columns, expected {expected_p}")
    return TargetSample(X)


def read_labeled_csv(path, outcome_column: str = "y", group_column: str | None = None):
    """(X, y, group labels or None) from a labeled evaluation CSV."""
    header, body = _read_rows(path)
    if outcome_column not in header:
        raise SchemaError(f"{path}: missing column '{outcome_column}'")
    if group_column is not None and group_column not in header:
        raise SchemaError(f"{path}: missing column '{group_column}'")
    if not body:
        raise ParseError(f"{path}: no data rows")
    drop = {outcome_column} | ({group_column} if group_column else set())
    features = [c for c in header if c not in drop]
    X = _numeric_matrix(header, body, features, path)
    y = _numeric_matrix(header, body, [outcome_column], path)[:, 0]
    g = None
    if group_column:
        g = _numeric_matrix(header, body, [group_column], path)[:, 0].astype(int)
    return X, y, g


def write_source_csv(path, groups: Sequence[SourceGroup], group_column="group", outcome_column="y") -> None:
    """Inverse of :func:`ingest_source_csv` (repr floats, so the round trip is exact)."""
    p = check_common_dimension(groups)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([group_column, *[f"x{j + 1}" for j in range(p)], outcome_column])
        for g in groups:
            lab = g.label if g.label is not None else g.group_id
            for xi, yi in zip(g.covariates, g.outcomes):
                w.writerow([lab, *map(repr, xi.tolist()), repr(float(yi))])


def write_matrix_csv(path, X: np.ndarray, columns: Sequence[str] | None = None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = list(columns) if columns else [f"x{j + 1}" for j in range(X.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in X:
            w.writerow([repr(v) for v in row.tolist()])

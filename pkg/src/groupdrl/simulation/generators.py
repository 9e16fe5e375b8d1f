"""Seeded generators for the three synthetic designs.

Every generator returns ``(groups, target, truth)``. ``truth`` exposes the
exact conditional means so tests can compute oracle quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ..data import MixtureSpec, SourceGroup, TargetSample
from ..errors import ValidationError

DESIGNS = ("interaction", "indicator", "highdim_shared")
DEFAULT_P = {"interaction": 5, "indicator": 4, "highdim_shared": 200}
INTERACTION_VALUES = np.array([0.4, 0.2, 0.0])
INTERACTION_PROBS = np.array([0.3, 0.4, 0.3])
INDICATOR_VALUES = np.array([8.0, 1.6, 0.0, -4.0])
# target mean shift of the indicator design (its covariate law is otherwise unspecified)
INDICATOR_TARGET_SHIFT = 0.5
N_BASE = 10
HETERO = slice(10, 13)


@dataclass(frozen=True)
class ScenarioSpec:
    design: str = "interaction"
    L: int = 2
    n_per_group: tuple | None = None
    q_sou: tuple | None = None
    n_P: int | None = None
    n_Q: int = 10_000
    q_tar: tuple | None = None
    p: int | None = None
    seed: int = 0
    coef_seed: int | None = None
    zero_coefficients: bool = False
    target_shift: float | None = None

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValidationError(f"unknown design {self.design!r}")
        if self.L < 1:
            raise ValidationError("L must be positive")
        p = self.p or DEFAULT_P[self.design]
        if self.design == "interaction" and p != 5:
            raise ValidationError("the interaction design has p = 5")
        if self.design == "indicator" and p != 4:
            raise ValidationError("the indicator design has p = 4")
        if self.design == "highdim_shared" and p < 13:
            raise ValidationError("the high-dimensional design needs p >= 13")
        object.__setattr__(self, "p", p)
        if self.q_sou is not None:
            MixtureSpec(self.q_sou)
            if len(self.q_sou) != self.L:
                raise ValidationError("q_sou must have L entries")
        if self.q_tar is not None and len(self.q_tar) != self.L:
            raise ValidationError("q_tar must have L entries")
        if self.n_Q < 1:
            raise ValidationError("n_Q must be positive")

    def group_sizes(self) -> list[int]:
        if self.n_per_group is not None:
            sizes = list(self.n_per_group) if np.ndim(self.n_per_group) else [int(self.n_per_group)] * self.L
            if len(sizes) != self.L:
                raise ValidationError("n_per_group must have L entries")
            return [int(s) for s in sizes]
        n_P = self.n_P or 2000 * self.L
        q = np.asarray(self.q_sou if self.q_sou is not None else np.full(self.L, 1.0 / self.L))
        sizes = np.floor(q * n_P).astype(int)
        sizes[np.argmax(q)] += n_P - sizes.sum()
        return sizes.tolist()

    def shift(self) -> float:
        if self.target_shift is not None:
            return float(self.target_shift)
        return INDICATOR_TARGET_SHIFT if self.design == "indicator" else 0.0

    def with_(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# conditional mean families


def interaction_features(X: np.ndarray) -> np.ndarray:
    """Columns x_j (j <= 5) then x_j x_k - E[x_j x_k] (j <= k) under N(0, I)."""
    p = X.shape[1]
    cols = [X[:, j] for j in range(p)]
    for j in range(p):
        for k in range(j, p):
            cols.append(X[:, j] * X[:, k] - (1.0 if j == k else 0.0))
    return np.column_stack(cols)


def indicator_features(X: np.ndarray) -> np.ndarray:
    """Columns 1[x_j>0], 1[x_j>0]1[x_k>0] (j<=k), 1[x_j<2]1[x_k>-2] (j<=k)."""
    p = X.shape[1]
    pos = (X > 0).astype(float)
    below = (X < 2).astype(float)
    above = (X > -2).astype(float)
    cols = [pos[:, j] for j in range(p)]
    pairs = [(j, k) for j in range(p) for k in range(j, p)]
    cols += [pos[:, j] * pos[:, k] for j, k in pairs]
    cols += [below[:, j] * above[:, k] for j, k in pairs]
    return np.column_stack(cols)


def _n_pairs(p):
    return p * (p + 1) // 2


@dataclass(frozen=True, eq=False)
class LinearInFeatures:
    """x -> features(x) @ coef."""

    features: Callable
    coef: np.ndarray

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.features(X) @ self.coef


def _identity_features(X):
    return X


@dataclass(frozen=True, eq=False)
class Truth:
    """Exact data-generating quantities of one scenario draw."""

    design: str
    models: tuple
    p: int
    target_mean: np.ndarray
    f_Q: Callable | None = None
    q_tar: MixtureSpec | None = None
    coefficients: dict = field(default_factory=dict)
    base_coefficients: np.ndarray | None = None

    @property
    def L(self) -> int:
        return len(self.models)

    def sample_target_covariates(self, n: int, rng) -> np.ndarray:
        return self.target_mean + rng.standard_normal((n, self.p))

    def group_outcomes(self, X, l: int, rng) -> np.ndarray:
        return self.models[l](X) + rng.standard_normal(X.shape[0])

    def mixture_outcomes(self, X, q, rng) -> np.ndarray:
        """Y drawn from the q-mixture of the group conditionals at covariates X."""
        q = np.asarray(q, dtype=float)
        labels = rng.choice(self.L, size=X.shape[0], p=q / q.sum())
        F = self.mean_matrix(X)
        return F[labels, np.arange(X.shape[0])] + rng.standard_normal(X.shape[0])

    def mean_matrix(self, X) -> np.ndarray:
        return np.vstack([f(X) for f in self.models])

    def mixture_mean(self, q) -> Callable:
        q = np.asarray(q, dtype=float)
        return lambda X: q @ self.mean_matrix(X)

    def gamma_mc(self, n: int, rng) -> np.ndarray:
        """Monte Carlo E_Q[f_k f_l] from ``n`` target draws."""
        F = self.mean_matrix(self.sample_target_covariates(n, rng))
        return F @ F.T / n


def _coef_rng(spec: ScenarioSpec):
    return np.random.default_rng(spec.seed if spec.coef_seed is None else spec.coef_seed)


def _sources(spec: ScenarioSpec, truth: Truth, rng, source_mean=0.0) -> list[SourceGroup]:
    groups = []
    for l, n in enumerate(spec.group_sizes()):
        X = source_mean + rng.standard_normal((n, spec.p))
        groups.append(SourceGroup(l, X, truth.group_outcomes(X, l, rng), label=l + 1))
    return groups


def _finish(spec, truth, data_rng):
    groups = _sources(spec, truth, data_rng)
    target = TargetSample(truth.sample_target_covariates(spec.n_Q, data_rng))
    return groups, target, truth


def _data_rng(spec):
    # data stream kept apart from the coefficient stream
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))


def gen_interaction(spec: ScenarioSpec):
    """Linear plus centered pairwise-interaction models on N(0, I_5) covariates."""
    if spec.design != "interaction":
        raise ValidationError("spec.design must be 'interaction'")
    n_feat = spec.p + _n_pairs(spec.p)
    crng = _coef_rng(spec)
    coefs = crng.choice(INTERACTION_VALUES, size=(spec.L, n_feat), p=INTERACTION_PROBS)
    if spec.zero_coefficients:
        coefs = np.zeros_like(coefs)
    models = tuple(LinearInFeatures(interaction_features, c) for c in coefs)
    truth = _with_target(spec, Truth("interaction", models, spec.p, np.full(spec.p, spec.shift()),
                                     coefficients={"alpha": coefs[:, : spec.p], "beta": coefs[:, spec.p :]}))
    return _finish(spec, truth, _data_rng(spec))


def gen_indicator(spec: ScenarioSpec):
    """Indicator main effects and interactions on R^4.

    Each of the three coefficient families is drawn i.i.d. uniform over
    {8, 1.6, 0, -4}. Sources are N(0, I_4); the target is N(shift * 1, I_4).
    """
    if spec.design != "indicator":
        raise ValidationError("spec.design must be 'indicator'")
    m = _n_pairs(spec.p)
    crng = _coef_rng(spec)
    alpha = crng.choice(INDICATOR_VALUES, size=(spec.L, spec.p))
    beta = crng.choice(INDICATOR_VALUES, size=(spec.L, m))
    gamma = crng.choice(INDICATOR_VALUES, size=(spec.L, m))
    if spec.zero_coefficients:
        alpha, beta, gamma = (np.zeros_like(a) for a in (alpha, beta, gamma))
    coefs = np.hstack([alpha, beta, -gamma])
    models = tuple(LinearInFeatures(indicator_features, c) for c in coefs)
    truth = _with_target(spec, Truth("indicator", models, spec.p, np.full(spec.p, spec.shift()),
                                     coefficients={"alpha": alpha, "beta": beta, "gamma": gamma}))
    return _finish(spec, truth, _data_rng(spec))


def gen_highdim_shared(spec: ScenarioSpec):
    """Shared sparse base model plus group-specific effects on coordinates 11-13."""
    if spec.design != "highdim_shared":
        raise ValidationError("spec.design must be 'highdim_shared'")
    p = spec.p
    base = np.zeros(p)
    base[:N_BASE] = 0.5
    crng = _coef_rng(spec)
    hetero = crng.standard_normal((spec.L, 3))
    if spec.zero_coefficients:
        hetero = np.zeros_like(hetero)
    coefs = np.tile(base, (spec.L, 1))
    coefs[:, HETERO] = hetero
    models = tuple(LinearInFeatures(_identity_features, c) for c in coefs)
    # the target's own effects are redrawn every replication
    trng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    tq = base.copy()
    tq[HETERO] = trng.standard_normal(3)
    truth = Truth(
        "highdim_shared", models, p, np.full(p, spec.shift()),
        f_Q=LinearInFeatures(_identity_features, tq),
        coefficients={"group": coefs, "target": tq},
        base_coefficients=base,
    )
    groups, target, truth = _finish(spec, truth, _data_rng(spec))
    return groups, target, truth, base


def _with_target(spec: ScenarioSpec, truth: Truth) -> Truth:
    if spec.q_tar is None:
        return truth
    q = MixtureSpec(spec.q_tar)
    return replace(truth, q_tar=q, f_Q=truth.mixture_mean(q))


GENERATORS = {
    "interaction": gen_interaction,
    "indicator": gen_indicator,
    "highdim_shared": gen_highdim_shared,
}


def generate(spec: ScenarioSpec):
    """Dispatch on the design; always returns (groups, target, truth)."""
    out = GENERATORS[spec.design](spec)
    return out[:3]

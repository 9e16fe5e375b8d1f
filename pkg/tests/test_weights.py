import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupdrl.errors import IndefiniteMatrixError, ValidationError
from groupdrl.gamma import GammaMatrix
from groupdrl.weights import (
    UncertaintySet,
    diameter,
    group_rewards,
    minimax_oracle,
    project_H,
    project_simplex,
    solve_weights,
)


def G(m):
    return GammaMatrix(np.asarray(m, dtype=float), "exact")


def random_psd(rng, L, rank=None):
    A = rng.standard_normal((L, rank or L))
    M = A @ A.T
    return 0.5 * (M + M.T)


@pytest.mark.parametrize("v, expected", [((0.3, 0.7), (0.3, 0.7)), ((2, 2), (0.5, 0.5)), ((1.2, -0.2), (1.0, 0.0))])
def test_simplex_projection_examples(v, expected):
    assert np.allclose(project_simplex(v), expected, atol=1e-15, rtol=0)


@settings(max_examples=60, deadline=None)
@given(v=st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_simplex_projection_is_a_projection(v):
    q = np.asarray(project_simplex(v))
    assert q.min() >= 0 and abs(q.sum() - 1) < 1e-12
    # obtuse-angle condition: (v - q) . (s - q) <= 0 for every vertex s
    for s in np.eye(len(v)):
        assert (np.asarray(v) - q) @ (s - q) <= 1e-9


def test_projection_onto_full_simplex_matches():
    v = np.array([0.9, -0.3, 0.6])
    assert np.array_equal(np.asarray(project_H(v, UncertaintySet.full_simplex(3))), np.asarray(project_simplex(v)))


def test_projection_onto_singleton():
    H = UncertaintySet.singleton([0.5, 0.5])
    assert np.asarray(project_H([3.0, -7.0], H)).tolist() == [0.5, 0.5]


def test_projection_onto_unscaled_ball_boundary():
    H = UncertaintySet.l2_ball([0.5, 0.5], 0.1, scaled=False)
    q = np.asarray(project_H([1.0, 0.0], H))
    d = 0.1 / math.sqrt(2)
    assert q == pytest.approx([0.5 + d, 0.5 - d], abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), L=st.integers(2, 6), rho=st.floats(0.01, 0.6))
def test_ball_projection_feasible(seed, L, rho):
    rng = np.random.default_rng(seed)
    H = UncertaintySet.l2_ball(rng.dirichlet(np.ones(L)), rho)
    q = np.asarray(project_H(3 * rng.standard_normal(L), H))
    assert H.contains(q)


def test_scaled_radius():
    H = UncertaintySet.l2_ball([0.25] * 4, 0.1)
    assert H.radius == pytest.approx(0.2)
    assert UncertaintySet.l2_ball([0.25] * 4, 0.1, scaled=False).radius == pytest.approx(0.1)


def test_invalid_sets_rejected():
    with pytest.raises(ValidationError):
        UncertaintySet.l2_ball([0.6, 0.6], 0.1)
    with pytest.raises(ValidationError):
        UncertaintySet.singleton([0.2, 0.2])


def test_diameter():
    assert diameter(UncertaintySet.full_simplex(3), 3) == pytest.approx(math.sqrt(2))
    assert diameter(UncertaintySet.singleton([1.0, 0.0]), 2) == 0.0
    assert diameter(UncertaintySet.l2_ball([0.5, 0.5], 0.05, scaled=False), 2) == pytest.approx(0.1)


def test_identity_gamma():
    s = solve_weights(G(np.eye(2)))
    assert np.allclose(s.q, [0.5, 0.5], atol=1e-12) and s.objective == pytest.approx(0.5, abs=1e-12)


def test_diagonal_one_four():
    s = solve_weights(G(np.diag([1.0, 4.0])))
    assert np.allclose(s.q, [0.8, 0.2], atol=1e-12) and s.objective == pytest.approx(0.8, abs=1e-12)
    grid = np.round(np.arange(1001) / 1000, 3)
    assert grid[np.argmin(grid**2 + 4 * (1 - grid) ** 2)] == pytest.approx(0.8)


def test_boundary_solution():
    s = solve_weights(G([[1.0, 2.0], [2.0, 5.0]]))
    assert np.asarray(s.q).tolist() == [1.0, 0.0]


def test_pgd_agrees_with_closed_form_on_examples():
    for m in (np.eye(2), np.diag([1.0, 4.0]), [[1.0, 2.0], [2.0, 5.0]]):
        a, b = solve_weights(G(m)), solve_weights(G(m), method="pgd")
        assert np.allclose(a.q, b.q, atol=1e-8)


def test_indefinite_matrix_rejected():
    with pytest.raises(IndefiniteMatrixError):
        solve_weights(G([[1.0, 2.0], [2.0, 1.0]]))


def test_singleton_returns_the_point_exactly():
    q0 = [0.1, 0.2, 0.7]
    s = solve_weights(G(np.eye(3)), UncertaintySet.singleton(q0))
    assert np.asarray(s.q).tolist() == q0


def test_flat_face_flagged():
    s = solve_weights(G(np.ones((3, 3))))
    assert s.flat


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), L=st.integers(2, 7), kind=st.sampled_from(["simplex", "ball"]))
def test_solution_certificate(seed, L, kind):
    rng = np.random.default_rng(seed)
    Gm = random_psd(rng, L) + 0.05 * np.eye(L)
    H = UncertaintySet.full_simplex(L) if kind == "simplex" else UncertaintySet.l2_ball(
        rng.dirichlet(np.ones(L)), float(rng.uniform(0.02, 0.4)))
    s = solve_weights(G(Gm), H)
    q = np.asarray(s.q)
    assert H.contains(q, tol=1e-9)
    assert s.objective == pytest.approx(q @ Gm @ q, abs=1e-12)
    # no feasible point improves the objective to first order
    grad = 2 * Gm @ q
    for _ in range(50):
        z = np.asarray(project_H(rng.dirichlet(np.ones(L)), H))
        assert grad @ (z - q) >= -1e-7
    if kind == "simplex":
        support = q > 1e-9
        assert np.ptp(grad[support]) < 1e-7
        assert np.all(grad[~support] >= grad[support].min() - 1e-7)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), L=st.integers(2, 6), c=st.floats(1e-3, 1e3))
def test_scale_equivariance(seed, L, c):
    Gm = random_psd(np.random.default_rng(seed), L) + 0.1 * np.eye(L)
    assert np.allclose(solve_weights(G(Gm)).q, solve_weights(G(c * Gm)).q, atol=1e-8)


def test_solution_json():
    d = json.loads(solve_weights(G(np.diag([1.0, 4.0]))).to_json())
    assert set(d) >= {"q", "objective", "iterations", "converged", "active_set"}


def _table(values):
    return lambda x: values[np.asarray(x, dtype=int).reshape(-1)]


def test_oracle_flat_for_identical_models():
    v = np.array([1.0, -2.0, 0.5])
    q = minimax_oracle([_table(v), _table(v)], np.arange(3), mesh=0.05)
    cand = np.column_stack([np.linspace(0, 1, 21), 1 - np.linspace(0, 1, 21)])
    worst = group_rewards(np.vstack([v, v]), np.full(3, 1 / 3), cand).min(axis=1)
    assert np.ptp(worst) < 1e-12
    assert len(q) == 2


def test_oracle_orthogonal_equal_norm_models():
    q = minimax_oracle([_table(np.array([1.0, 0.0])), _table(np.array([0.0, 1.0]))], np.arange(2))
    assert np.allclose(q, [0.5, 0.5], atol=0.01)


def test_oracle_on_diagonal_instance():
    # two support points with equal mass: Gamma = diag(1, 4)
    f1 = _table(np.array([math.sqrt(2), 0.0]))
    f2 = _table(np.array([0.0, 2 * math.sqrt(2)]))
    q = minimax_oracle([f1, f2], np.arange(2), [0.5, 0.5])
    assert np.max(np.abs(np.asarray(q) - [0.8, 0.2])) <= 0.01


def test_solver_never_worse_than_the_oracle():
    rng = np.random.default_rng(11)
    for _ in range(30):
        L = int(rng.integers(2, 4))
        m = int(rng.integers(L, 21))
        vals, masses = rng.standard_normal((L, m)), rng.dirichlet(np.ones(m))
        Gm = (vals * masses) @ vals.T
        qs = np.asarray(solve_weights(G(0.5 * (Gm + Gm.T))).q)
        qo = np.asarray(minimax_oracle([_table(v) for v in vals], np.arange(m), masses))
        r = group_rewards(vals, masses, np.vstack([qs, qo])).min(axis=1)
        assert r[0] >= r[1] - 1e-12


@pytest.mark.parametrize("seed", [12, 13, 14])
def test_fine_mesh_oracle_lands_near_the_solver(seed):
    rng = np.random.default_rng(seed)
    vals, masses = rng.standard_normal((3, 6)), rng.dirichlet(np.ones(6))
    Gm = (vals * masses) @ vals.T
    qs = np.asarray(solve_weights(G(0.5 * (Gm + Gm.T))).q)
    qo = np.asarray(minimax_oracle([_table(v) for v in vals], np.arange(6), masses, mesh=0.001))
    assert np.max(np.abs(qs - qo)) <= 0.01


def test_perturbation_bound_small_sample():
    rng = np.random.default_rng(13)
    for _ in range(50):
        L = int(rng.integers(2, 5))
        Gm = random_psd(rng, L) + 0.1 * np.eye(L)
        E = 0.05 * rng.standard_normal((L, L))
        Gh = Gm + 0.5 * (E + E.T)
        if np.linalg.eigvalsh(Gh).min() < 0:
            continue
        lam = np.linalg.eigvalsh(Gm).min()
        gap = np.linalg.norm(np.asarray(solve_weights(G(Gh)).q) - np.asarray(solve_weights(G(Gm)).q))
        assert gap <= min(L * np.abs(Gh - Gm).max() / lam, math.sqrt(2)) + 1e-9

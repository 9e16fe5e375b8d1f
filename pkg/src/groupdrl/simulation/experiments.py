"""Registered simulation experiments producing plot-ready tables.

``run_experiment(name, scale=..., **overrides)`` resolves parameters as
registry "paper" defaults, then the "ci" overrides when ``scale == "ci"``,
then keyword overrides. Replication r uses seed ``seed + r``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from importlib import resources

import numpy as np

from ..data import MixtureSpec
from ..errors import ValidationError
from ..estimator import FitConfig, fit_drl, fit_erm, fit_plugin_drl, fit_sq_dro_L2, solve_stage
from ..evaluation import mean_and_se, write_rows_csv
from ..gamma import GammaMatrix, psd_repair
from ..learners import LearnerSpec
from ..weights import H_mesh, UncertaintySet, solve_weights
from .generators import ScenarioSpec, gen_highdim_shared, generate

SCALES = ("paper", "ci")


def load_registry() -> dict:
    text = resources.files("groupdrl.simulation").joinpath("experiments.json").read_text()
    return json.loads(text)


def resolve_params(name: str, scale: str = "paper", overrides: dict | None = None) -> dict:
    reg = load_registry()
    if name not in reg:
        raise ValidationError(f"unknown experiment {name!r}; known: {sorted(reg)}")
    if scale not in SCALES:
        raise ValidationError(f"scale must be one of {SCALES}")
    entry = reg[name]
    params = dict(entry["paper"])
    if scale == "ci":
        params.update(entry.get("ci", {}))
    params.update({k: v for k, v in (overrides or {}).items() if v is not None})
    params["name"] = name
    params["runner"] = entry["runner"]
    params["design"] = entry["design"]
    params["scale"] = scale
    return params


def _grid(g) -> list[float]:
    if isinstance(g, dict):
        n = int(round(abs(g["start"] - g["stop"]) / g["step"]))
        return [round(g["start"] + i * math.copysign(g["step"], g["stop"] - g["start"]), 10) for i in range(n + 1)]
    return [float(x) for x in g]


def _learner(params) -> LearnerSpec:
    lr = params.get("learner", {"kind": "forest"})
    if isinstance(lr, str):
        return LearnerSpec(lr, {})
    return LearnerSpec(lr.get("kind", "forest"), dict(lr.get("params", {})))


def _map_reps(fn, reps, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, range(reps)))
    return [fn(r) for r in range(reps)]


def _ball(center, rho) -> UncertaintySet:
    return UncertaintySet.l2_ball(center, rho, scaled=True)


def _q_sou_for(kind_or_list, L):
    if kind_or_list == "even":
        return [1.0 / L] * L
    if kind_or_list == "uneven":
        rest = 0.45 / (L - 1)
        return [0.55] + [rest] * (L - 1)
    return list(kind_or_list)


# ---------------------------------------------------------------------------
# mixture-reward experiments (interaction design)


def _fit_mixture_methods(groups, target, q_sou, params, seed):
    """Weights (or a single ERM model) per method, sharing fits where possible."""
    learner = _learner(params)
    L = len(groups)
    base = FitConfig(learner=learner, split_mode=params.get("split_mode", "no_split"), seed=seed)
    drl0 = fit_drl(groups, target, base)
    out = {"DRL0": ("weights", drl0.weights, drl0)}
    methods = params["methods"]
    if "DRL0-split" in methods:
        m = fit_drl(groups, target, FitConfig(learner=learner, split_mode="deterministic", seed=seed))
        out["DRL0-split"] = ("weights", m.weights, m)
    if "DRL-rho" in methods:
        for rho in _grid(params["rhos"]):
            H = _ball(q_sou, rho)
            _, _, sol = solve_stage(drl0.gamma_raw, FitConfig(learner=learner, h_set=H, seed=seed), L)
            out[f"DRL-rho={rho:g}"] = ("weights", sol.q, drl0)
    if "ERM" in methods:
        out["ERM"] = ("model", fit_erm(groups, learner, seed), None)
    if "DRO-sq" in methods and L == 2:
        m = fit_sq_dro_L2(groups, target, learner, seed)
        out["DRO-sq"] = ("weights", m.weights, m)
    return out


def _per_group_rewards(fitted, truth, n_Q, rng):
    """Reward of every method on each group's outcomes at common target covariates."""
    X = truth.sample_target_covariates(n_Q, rng)
    Ytrue = truth.mean_matrix(X)
    Y = Ytrue + rng.standard_normal(Ytrue.shape)
    F_cache = {}
    rewards = {}
    for name, (kind, obj, model) in fitted.items():
        if kind == "model":
            pred = obj.predict(X)
        else:
            key = id(model)
            if key not in F_cache:
                F_cache[key] = np.vstack([f.predict(X) for f in model.predictors])
            pred = np.asarray(obj) @ F_cache[key]
        rewards[name] = np.mean(Y**2 - (Y - pred) ** 2, axis=1)
    return rewards


def _mixture_rep(params, L, q_sou, rep_seed):
    sizes = [int(round(q * params["n_P_per_group"] * L)) for q in q_sou]
    sizes[int(np.argmax(q_sou))] += params["n_P_per_group"] * L - sum(sizes)
    spec = ScenarioSpec("interaction", L, n_per_group=tuple(sizes), n_Q=params["n_Q"], seed=rep_seed)
    groups, target, truth = generate(spec)
    fitted = _fit_mixture_methods(groups, target, q_sou, params, rep_seed)
    rng = np.random.default_rng(np.random.SeedSequence([rep_seed, 7]))
    rewards = _per_group_rewards(fitted, truth, params["n_Q"], rng)
    weights = {k: v[1].tolist() for k, v in fitted.items() if v[0] == "weights"}
    return rewards, weights


def run_mixture_rewards(params, seed, threads):
    name = params["name"]
    settings = []
    if "L_list" in params:
        for L in params["L_list"]:
            for kind in params["q_sou_kinds"]:
                settings.append((L, kind, _q_sou_for(kind, L)))
    else:
        for q in params["q_sou_list"]:
            settings.append((params["L"], "custom", list(q)))

    rows, weight_rows = [], []
    for si, (L, kind, q_sou) in enumerate(settings):
        def one(r, L=L, q_sou=q_sou):
            return _mixture_rep(params, L, q_sou, seed + r)

        results = _map_reps(one, params["reps"], threads)
        for r, (rewards, weights) in enumerate(results):
            common = {"rep": r, "seed": seed + r, "L": L, "q_sou": q_sou}
            for method, rvec in rewards.items():
                rows.extend(_mixture_summaries(name, params, common, method, rvec, q_sou))
            for method, w in weights.items():
                weight_rows.append({**common, "method": method, "weights": w})
    return {"rewards": rows, "weights": weight_rows}


def _mixture_summaries(name, params, common, method, r, q_sou):
    L = r.size
    out = [{**common, "method": method, "measure": "worst_vertex", "x": "", "reward": float(r.min())}]
    out.append({**common, "method": method, "measure": "at_q_sou", "x": "", "reward": float(np.dot(q_sou, r))})
    if name == "fig2-L2" or "grid_step" in params:
        step = params.get("grid_step", 0.05)
        for i in range(int(round(1 / step)) + 1):
            q1 = round(i * step, 10)
            out.append({**common, "method": method, "measure": "q_tar1", "x": q1,
                        "reward": float(q1 * r[0] + (1 - q1) * r[1])})
    if "e_grid" in params:
        pts = H_mesh(UncertaintySet.full_simplex(L), L, params.get("mesh", 0.01))
        vals = pts @ r
        dist = np.linalg.norm(pts - np.asarray(q_sou), axis=1)
        for e in _grid(params["e_grid"]):
            inside = dist <= e * math.sqrt(L) + 1e-12
            worst = float(vals[inside].min()) if inside.any() else float(np.dot(q_sou, r))
            out.append({**common, "method": method, "measure": "worst_e", "x": e, "reward": worst})
    if "q_tars" in params:
        for j, qt in enumerate(params["q_tars"]):
            out.append({**common, "method": method, "measure": f"q_tar_{j + 1}", "x": "",
                        "reward": float(np.dot(qt, r))})
    return out


# ---------------------------------------------------------------------------
# weight-error experiment (indicator design with covariate shift)


def oracle_weights(truth, n, seed) -> MixtureSpec:
    """Weights solved from a Monte Carlo Gamma of the exact models."""
    G = truth.gamma_mc(n, np.random.default_rng(np.random.SeedSequence([seed, 11])))
    G = 0.5 * (G + G.T)
    return solve_weights(psd_repair(GammaMatrix(G, "monte_carlo")), UncertaintySet.full_simplex(truth.L)).q


def _weight_error_rep(params, n, rep_seed):
    spec = ScenarioSpec("indicator", params["L"], n_per_group=n, n_Q=params["n_Q"], seed=rep_seed)
    groups, target, truth = generate(spec)
    q_star = np.asarray(oracle_weights(truth, params["oracle_n"], rep_seed))
    learner = _learner(params)
    split = params.get("split_mode", "deterministic")
    fits = {}
    if "plugin" in params["methods"]:
        fits["plugin"] = fit_plugin_drl(groups, target, FitConfig(learner=learner, split_mode=split, seed=rep_seed))
    if "corrected-logistic" in params["methods"]:
        fits["corrected-logistic"] = fit_drl(
            groups, target,
            FitConfig(learner=learner, split_mode=split, shift_mode="logistic_ratio", seed=rep_seed),
        )
    if "corrected-identity" in params["methods"]:
        fits["corrected-identity"] = fit_drl(groups, target, FitConfig(learner=learner, split_mode=split, seed=rep_seed))
    rng = np.random.default_rng(np.random.SeedSequence([rep_seed, 13]))
    Xe = truth.sample_target_covariates(params["eval_n"], rng)
    f_star = q_star @ truth.mean_matrix(Xe)
    rows = []
    for method, m in fits.items():
        q = np.asarray(m.weights)
        rows.append({
            "n": n, "method": method,
            "q_err": float(np.sum((q - q_star) ** 2)),
            "f_err": float(np.mean((m.predict(Xe) - f_star) ** 2)),
            "weights": q.tolist(), "q_star": q_star.tolist(),
        })
    return rows


def run_weight_error(params, seed, threads):
    rows = []
    for n in params["n_list"]:
        res = _map_reps(lambda r, n=n: _weight_error_rep(params, n, seed + r), params["reps"], threads)
        for r, rep_rows in enumerate(res):
            for row in rep_rows:
                rows.append({"rep": r, "seed": seed + r, **row, "q_star_source": "monte_carlo"})
    return {"weight_error": rows}


# ---------------------------------------------------------------------------
# high-dimensional shared-component experiment


def _highdim_rep(params, n, rep_seed):
    spec = ScenarioSpec("highdim_shared", params["L"], n_per_group=n, n_Q=params["n_Q"], p=params["p"],
                        seed=rep_seed, coef_seed=params.get("coef_seed"))
    groups, target, truth, base = gen_highdim_shared(spec)
    learner = _learner(params)
    cfg = FitConfig(learner=learner, split_mode=params.get("split_mode", "no_split"), seed=rep_seed)
    drl0 = fit_drl(groups, target, cfg)
    erm = fit_erm(groups, learner, rep_seed)
    coef_drl = np.asarray(drl0.weights) @ np.vstack([f.coef[1:] for f in drl0.predictors])
    rng = np.random.default_rng(np.random.SeedSequence([rep_seed, 17]))
    X = truth.sample_target_covariates(params["n_Q"], rng)
    y = truth.f_Q(X) + rng.standard_normal(X.shape[0])
    rows = []
    for method, pred, coef in (("DRL0", drl0.predict(X), coef_drl), ("ERM", erm.predict(X), erm.coef[1:])):
        rows.append({"n": n, "method": method,
                     "reward": float(np.mean(y**2 - (y - pred) ** 2)),
                     "coef_dist": float(np.sum((coef - base) ** 2))})
    weights = [{"n": n, "group": l + 1, "weight": float(w),
                "hetero_coef": truth.coefficients["group"][l, 10:13].tolist()}
               for l, w in enumerate(drl0.weights)]
    return rows, weights


def run_highdim(params, seed, threads):
    rows, wrows = [], []
    for n in params["n_list"]:
        res = _map_reps(lambda r, n=n: _highdim_rep(params, n, seed + r), params["reps"], threads)
        for r, (rr, ww) in enumerate(res):
            rows += [{"rep": r, "seed": seed + r, **x} for x in rr]
            wrows += [{"rep": r, "seed": seed + r, **x} for x in ww]
    return {"highdim": rows, "weights": wrows}


RUNNERS = {
    "mixture_rewards": run_mixture_rewards,
    "weight_error": run_weight_error,
    "highdim": run_highdim,
}


def run_experiment(name: str, overrides: dict | None = None, *, seed: int = 0, scale: str = "paper",
                   threads: int = 1, **kw) -> dict:
    """Run a registered experiment; returns {table name: list of row dicts, "params": ...}.

    Shorthand keyword overrides: ``n`` sets a single per-group size and
    ``reps`` the replication count.
    """
    ov = dict(overrides or {})
    ov.update(kw)
    if "n" in ov:
        n = ov.pop("n")
        ov["n_list"] = [n] if np.ndim(n) == 0 else list(n)
    params = resolve_params(name, scale, ov)
    tables = RUNNERS[params["runner"]](params, int(seed), threads)
    tables["params"] = params
    tables["summary"] = summarize(params, tables)
    return tables


def summarize(params, tables) -> list[dict]:
    out = []
    if "rewards" in tables:
        key = {}
        for r in tables["rewards"]:
            key.setdefault((r["L"], tuple(r["q_sou"]), r["method"], r["measure"], r["x"]), []).append(r["reward"])
        for (L, q, m, meas, x), vals in key.items():
            mean, se = mean_and_se(vals)
            out.append({"L": L, "q_sou": list(q), "method": m, "measure": meas, "x": x, "mean": mean, "se": se,
                        "reps": len(vals)})
    for tname, cols in (("weight_error", ("q_err", "f_err")), ("highdim", ("reward", "coef_dist"))):
        if tname in tables:
            key = {}
            for r in tables[tname]:
                key.setdefault((r["n"], r["method"]), []).append(r)
            for (n, m), rs in key.items():
                row = {"n": n, "method": m, "reps": len(rs)}
                for c in cols:
                    row[f"{c}_mean"], row[f"{c}_se"] = mean_and_se([x[c] for x in rs])
                out.append(row)
    return out


def write_outputs(result: dict, outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    name = result["params"]["name"]
    written = []
    for tname, rows in result.items():
        if tname in ("params", "summary"):
            continue
        path = os.path.join(outdir, f"{name}_{tname}.csv")
        write_rows_csv(path, rows)
        written.append(path)
    path = os.path.join(outdir, f"{name}_summary.json")
    with open(path, "w") as fh:
        json.dump({"params": result["params"], "summary": result["summary"]}, fh, indent=2, default=str)
    written.append(path)
    return written

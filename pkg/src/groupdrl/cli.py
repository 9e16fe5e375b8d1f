"""Command-line interface.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
Errors are printed to stderr as one JSON line: {"error": ..., "type": ..., "exit": ...}.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .data import ingest_source_csv, ingest_target_csv, read_labeled_csv
from .errors import GroupDRLError, NumericError, ProtocolError, StageError, ValidationError
from .evaluation import empirical_reward, worst_group_reward
from .estimator import FitConfig, fit_drl, fit_plugin_drl, load_model, model_to_dict, save_model
from .learners import LearnerSpec

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

FIT_DEFAULTS = {
    "h_set": "simplex",
    "ball_unscaled": False,
    "learner": "forest",
    "n_trees": 200,
    "min_leaf": 5,
    "mtry": None,
    "penalty": 2.0,
    "cv_folds": None,
    "shift": "none",
    "split": "det",
    "plugin": False,
    "group_column": "group",
    "outcome_column": "y",
    "ratio_l1": 0.0,
    "seed": 0,
    "threads": 1,
}
EXPERIMENT_DEFAULTS = {"reps": None, "seed": 0, "scale": "paper", "out": "results", "threads": 1}


def build_fingerprint() -> str:
    h = hashlib.sha256(__version__.encode())
    root = resources.files("groupdrl")
    for path in sorted(Path(str(root)).rglob("*")):
        if path.suffix in (".py", ".json"):
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()[:12]


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, help="print version and build fingerprint")

    def __call__(self, parser, namespace, values, option_string=None):
        print(f"groupdrl {__version__} (build {build_fingerprint()})")
        parser.exit(0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(f"usage: {message}", "UsageError", EXIT_INPUT)


def _fail(message: str, kind: str, code: int):
    sys.stderr.write(json.dumps({"error": message.replace("\n", " "), "type": kind, "exit": code}) + "\n")
    raise SystemExit(code)


def _fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("source", help="labeled multi-group CSV")
    p.add_argument("target", help="unlabeled target covariates CSV")
    p.add_argument("--h-set", help="simplex | ball:c1,...,cL,rho | point:q1,...,qL")
    p.add_argument("--ball-unscaled", action="store_true", default=None, help="ball radius is rho, not rho*sqrt(L)")
    p.add_argument("--learner", choices=["linear", "lasso", "forest"])
    p.add_argument("--n-trees", type=int)
    p.add_argument("--min-leaf", type=int)
    p.add_argument("--mtry", type=int)
    p.add_argument("--penalty", type=float, help="lasso penalty constant")
    p.add_argument("--cv-folds", type=int, help="choose the lasso penalty by K-fold CV")
    p.add_argument("--shift", choices=["none", "logistic"])
    p.add_argument("--split", help="det | seed:N | none")
    p.add_argument("--plugin", action="store_true", default=None, help="uncorrected plug-in Gamma")
    p.add_argument("--ratio-l1", type=float, help="L1 penalty constant of the ratio classifier")
    p.add_argument("--group-column")
    p.add_argument("--outcome-column")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="groupdrl", description="Group distributionally robust model aggregation.")
    parser.add_argument("--version", action=_VersionAction)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the robust aggregate from CSV inputs")
    _fit_options(p)
    _common(p)
    p.add_argument("--out", required=True, help="model JSON path")

    p = sub.add_parser("predict", help="predict with a saved model")
    p.add_argument("model")
    p.add_argument("X", help="covariate CSV")
    p.add_argument("--drop", default="", help="comma-separated columns to ignore")
    p.add_argument("--out", help="predictions CSV (stdout if omitted)")

    p = sub.add_parser("evaluate", help="empirical reward of a saved model")
    p.add_argument("model")
    p.add_argument("labeled", help="CSV with covariates and outcomes")
    p.add_argument("--outcome-column", default="y")
    p.add_argument("--group-column", default=None)

    p = sub.add_parser("experiment", help="run a registered simulation experiment")
    p.add_argument("name")
    p.add_argument("--reps", type=int)
    p.add_argument("--scale", choices=["paper", "ci"])
    p.add_argument("--out")
    _common(p)

    p = sub.add_parser("federate", help="fit through the simulated multi-site protocol")
    _fit_options(p)
    _common(p)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--transcript", required=True, help="JSON-lines transcript path")
    p.add_argument("--audit", help="audit report JSON path")
    return parser


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the --config file, then explicitly given flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ValidationError("config file must hold a JSON object")
        for k, v in from_file.items():
            cfg[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            cfg[k] = v
    return cfg


def _echo(cfg: dict) -> None:
    sys.stderr.write("resolved-config: " + json.dumps(cfg, sort_keys=True, default=str) + "\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"cannot parse numbers from {text!r}") from None


def parse_h_set(text: str, L: int, unscaled: bool = False):
    from .weights import UncertaintySet

    text = (text or "simplex").strip()
    if text == "simplex":
        return UncertaintySet.full_simplex(L)
    kind, _, rest = text.partition(":")
    vals = _floats(rest)
    if kind == "point":
        if len(vals) != L:
            raise ValidationError(f"point needs {L} weights, got {len(vals)}")
        return UncertaintySet.singleton(vals)
    if kind == "ball":
        if len(vals) != L + 1:
            raise ValidationError(f"ball needs {L} center weights and rho, got {len(vals)} numbers")
        return UncertaintySet.l2_ball(vals[:L], vals[L], scaled=not unscaled)
    raise ValidationError(f"unknown --h-set {text!r}")


def parse_split(text: str) -> tuple[str, int | None]:
    if text in ("det", "deterministic"):
        return "deterministic", None
    if text in ("none", "no_split"):
        return "no_split", None
    if text.startswith("seed:"):
        try:
            return "seeded", int(text[5:])
        except ValueError:
            raise ValidationError(f"bad split seed in {text!r}") from None
    raise ValidationError(f"unknown --split {text!r}")


def learner_from(cfg: dict) -> LearnerSpec:
    kind = cfg["learner"]
    if kind == "linear":
        return LearnerSpec("linear", {})
    if kind == "lasso":
        if cfg.get("cv_folds"):
            return LearnerSpec("lasso", {"cv_folds": int(cfg["cv_folds"])})
        return LearnerSpec("lasso", {"penalty_constant": float(cfg["penalty"])})
    if kind == "forest":
        params = {"n_trees": int(cfg["n_trees"]), "min_leaf": int(cfg["min_leaf"])}
        if cfg.get("mtry"):
            params["mtry"] = int(cfg["mtry"])
        return LearnerSpec("forest", params)
    raise ValidationError(f"unknown learner {kind!r}")


def _load_inputs(cfg):
    groups = ingest_source_csv(cfg["source"], cfg["group_column"], cfg["outcome_column"])
    target = ingest_target_csv(cfg["target"], expected_p=groups[0].p,
                               drop_columns=(cfg["group_column"], cfg["outcome_column"]))
    split_mode, split_seed = parse_split(cfg["split"])
    config = FitConfig(
        learner=learner_from(cfg),
        h_set=parse_h_set(cfg["h_set"], len(groups), bool(cfg.get("ball_unscaled"))),
        shift_mode="logistic_ratio" if cfg["shift"] == "logistic" else "none",
        split_mode=split_mode,
        seed=int(cfg["seed"]) if split_seed is None else split_seed,
        ratio_l1=float(cfg["ratio_l1"]),
        threads=int(cfg["threads"]),
    )
    return groups, target, config


def _summary(model) -> dict:
    return {
        "weights": model.weights.tolist(),
        "objective": None if model.solution is None else model.solution.objective,
        "converged": None if model.solution is None else model.solution.converged,
        "psd_repaired": model.gamma.psd_repaired,
        "fingerprint": model.config_fingerprint,
    }


def cmd_fit(args) -> int:
    cfg = resolve(args, FIT_DEFAULTS)
    _echo(cfg)
    groups, target, config = _load_inputs(cfg)
    model = (fit_plugin_drl if cfg["plugin"] else fit_drl)(groups, target, config)
    save_model(model, cfg["out"])
    print(json.dumps({**_summary(model), "out": cfg["out"]}))
    return EXIT_OK


def cmd_federate(args) -> int:
    from .federated import audit_privacy, run_protocol

    cfg = resolve(args, FIT_DEFAULTS)
    _echo(cfg)
    if cfg.get("plugin"):
        raise ValidationError("--plugin is not available in the federated protocol")
    groups, target, config = _load_inputs(cfg)
    model, log = run_protocol(groups, target, config)
    save_model(model, cfg["out"])
    log.to_jsonl(cfg["transcript"])
    audit = audit_privacy(log, groups)
    if cfg.get("audit"):
        with open(cfg["audit"], "w") as fh:
            json.dump(audit.to_dict(), fh, indent=2)
    print(json.dumps({**_summary(model), "out": cfg["out"], "messages": len(log), "audit": audit.to_dict()}))
    return EXIT_OK if audit.passed else EXIT_INPUT


def cmd_predict(args) -> int:
    model = load_model(args.model)
    drop = [c for c in args.drop.split(",") if c]
    X = ingest_target_csv(args.X, expected_p=model.p, drop_columns=drop).covariates
    pred = model.predict(X)
    lines = ["prediction"] + [repr(float(v)) for v in pred]
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    X, y, g = read_labeled_csv(args.labeled, args.outcome_column, args.group_column)
    if X.shape[1] != model.p:
        raise ValidationError(f"{args.labeled}: {X.shape[1]} covariate columns, model expects {model.p}")
    out = {"reward": empirical_reward(model.predict(X), y).reward, "n_eval": int(y.size)}
    if g is not None:
        labels = sorted(set(g.tolist()))
        sets = [(X[g == lab], y[g == lab]) for lab in labels]
        rep = worst_group_reward(model.predict, sets)
        out["groups"] = labels
        out["per_group_rewards"] = rep.per_group_rewards.tolist()
        out["worst_group_reward"] = rep.reward
        out["worst_group"] = labels[int(np.argmin(rep.per_group_rewards))]
    print(json.dumps(out))
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .simulation import run_experiment, write_outputs

    cfg = resolve(args, EXPERIMENT_DEFAULTS)
    _echo(cfg)
    overrides = {"reps": cfg["reps"]} if cfg.get("reps") else {}
    result = run_experiment(cfg["name"], overrides, seed=int(cfg["seed"]), scale=cfg["scale"],
                            threads=int(cfg["threads"]))
    files = write_outputs(result, cfg["out"])
    print(json.dumps({"experiment": cfg["name"], "files": files}))
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
    "federate": cmd_federate,
}


def _exit_code(exc: BaseException) -> int:
    while isinstance(exc, (StageError, ProtocolError)):
        exc = exc.cause
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_INPUT


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GroupDRLError, ValueError, OSError) as exc:
        code = _exit_code(exc)
        inner = exc
        while isinstance(inner, (StageError, ProtocolError)):
            inner = inner.cause
        _fail(str(exc), type(inner).__name__, code)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        _fail(str(exc), type(exc).__name__, EXIT_NUMERIC)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

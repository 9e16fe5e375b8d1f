import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import linear_groups
from groupdrl.cli import main, parse_h_set, parse_split
from groupdrl.data import MixtureSpec, write_matrix_csv, write_source_csv
from groupdrl.errors import ValidationError
from groupdrl.estimator import DRLModel, load_model, save_model
from groupdrl.gamma import GammaMatrix
from groupdrl.learners import FittedPredictor
from groupdrl.weights import UncertaintySet


def run(argv, capsys):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as exc:
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def files(tmp_path):
    groups, target = linear_groups(2, n=60, p=2, shift=0.3)
    src, tgt = tmp_path / "source.csv", tmp_path / "target.csv"
    write_source_csv(src, groups)
    write_matrix_csv(tgt, target.covariates)
    return tmp_path, src, tgt


def _fit(capsys, src, tgt, out, *extra):
    code, stdout, err = run(["fit", src, tgt, "--learner", "linear", "--out", out, *extra], capsys)
    assert code == 0, err
    return json.loads(stdout)


def test_fit_minimal_fixture(files, capsys):
    d, src, tgt = files
    res = _fit(capsys, src, tgt, d / "m.json")
    assert abs(sum(res["weights"]) - 1) < 1e-12
    assert load_model(d / "m.json").L == 2


def test_resolved_config_is_echoed(files, capsys):
    d, src, tgt = files
    code, _, err = run(["fit", src, tgt, "--out", d / "m.json", "--seed", 11], capsys)
    line = next(x for x in err.splitlines() if x.startswith("resolved-config: "))
    assert json.loads(line.split(": ", 1)[1])["seed"] == 11


def test_point_set_gives_exact_weights(files, capsys):
    d, src, tgt = files
    res = _fit(capsys, src, tgt, d / "m.json", "--h-set", "point:0.3,0.7")
    assert res["weights"] == [0.3, 0.7]


def test_plugin_matches_corrected_without_noise(tmp_path, capsys):
    groups, target = linear_groups(2, n=60, p=2, noise=0.0)
    src, tgt = tmp_path / "s.csv", tmp_path / "t.csv"
    write_source_csv(src, groups)
    write_matrix_csv(tgt, target.covariates)
    a = _fit(capsys, src, tgt, tmp_path / "a.json")["weights"]
    b = _fit(capsys, src, tgt, tmp_path / "b.json", "--plugin")["weights"]
    assert np.max(np.abs(np.subtract(a, b))) < 1e-6


def test_config_file_and_flag_precedence(files, capsys):
    d, src, tgt = files
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"h_set": "point:0.6,0.4", "seed": 5}))
    assert _fit(capsys, src, tgt, d / "m.json", "--config", cfg)["weights"] == [0.6, 0.4]
    assert _fit(capsys, src, tgt, d / "m.json", "--config", cfg, "--h-set", "point:0.1,0.9")["weights"] == [0.1, 0.9]


def test_predict_single_row_and_round_trip(files, capsys):
    d, src, tgt = files
    _fit(capsys, src, tgt, d / "m.json")
    one = d / "one.csv"
    write_matrix_csv(one, [[0.5, -1.0]])
    code, out, _ = run(["predict", d / "m.json", one], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "prediction" and len(lines) == 2
    model = load_model(d / "m.json")
    assert float(lines[1]) == model.predict(np.array([[0.5, -1.0]]))[0]


def test_predict_width_mismatch_exits_2(files, capsys):
    d, src, tgt = files
    _fit(capsys, src, tgt, d / "m.json")
    bad = d / "bad.csv"
    write_matrix_csv(bad, [[0.5, -1.0, 2.0]])
    code, _, err = run(["predict", d / "m.json", bad], capsys)
    assert code == 2
    assert json.loads(err.strip().splitlines()[-1])["error"]


def _constant_model(path, c):
    f = FittedPredictor("linear", {"coef": [c, 0.0]}, 1)
    save_model(DRLModel(MixtureSpec([1.0]), [f], GammaMatrix([[c * c]], "exact"), UncertaintySet.full_simplex(1)), path)


def _labeled(path, rows, grouped=False):
    if grouped:
        path.write_text("x1,y,group\n" + "".join(f"{x!r},{y!r},{g}\n" for x, y, g in rows))
    else:
        path.write_text("x1,y\n" + "".join(f"{x!r},{y!r}\n" for x, y, _ in rows))


def test_evaluate_zero_model(tmp_path, capsys):
    _constant_model(tmp_path / "z.json", 0.0)
    _labeled(tmp_path / "l.csv", [(0.1, 2.0, "a"), (0.2, -1.0, "b")])
    code, out, _ = run(["evaluate", tmp_path / "z.json", tmp_path / "l.csv"], capsys)
    assert code == 0 and json.loads(out)["reward"] == 0.0


def test_evaluate_two_point_fixture(tmp_path, capsys):
    _constant_model(tmp_path / "one.json", 1.0)
    _labeled(tmp_path / "l.csv", [(0.0, 2.0, 1), (0.0, 0.0, 2)], grouped=True)
    code, out, _ = run(["evaluate", tmp_path / "one.json", tmp_path / "l.csv", "--group-column", "group"], capsys)
    res = json.loads(out)
    assert res["reward"] == 1.0 and res["n_eval"] == 2
    # group 1: 4 - 1 = 3, group 2: 0 - 1 = -1
    assert res["per_group_rewards"] == [3.0, -1.0]
    assert res["worst_group"] == 2 and res["worst_group_reward"] == -1.0


def test_evaluate_perfect_fit(tmp_path, capsys):
    f = FittedPredictor("linear", {"coef": [0.0, 2.0]}, 1)
    save_model(DRLModel(MixtureSpec([1.0]), [f], GammaMatrix([[1.0]], "exact"), UncertaintySet.full_simplex(1)),
               tmp_path / "m.json")
    xs = [0.5, -1.0, 3.0]
    _labeled(tmp_path / "l.csv", [(x, 2 * x, "a") for x in xs])
    _, out, _ = run(["evaluate", tmp_path / "m.json", tmp_path / "l.csv"], capsys)
    assert json.loads(out)["reward"] == pytest.approx(np.mean((2 * np.array(xs)) ** 2), abs=1e-12)


def test_missing_file_exits_2(tmp_path, capsys):
    code, _, _ = run(["fit", tmp_path / "nope.csv", tmp_path / "nope2.csv", "--out", tmp_path / "m.json"], capsys)
    assert code == 2


def test_bad_flag_exits_2(files, capsys):
    d, src, tgt = files
    code, _, err = run(["fit", src, tgt, "--out", d / "m.json", "--split", "bogus"], capsys)
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["exit"] == 2


def test_unknown_experiment_exits_2(tmp_path, capsys):
    code, _, err = run(["experiment", "fig99", "--out", tmp_path], capsys)
    assert code == 2 and "unknown experiment" in err


@pytest.mark.parametrize("name", ["fig2-L2", "fig7", "fig9-weights"])
def test_experiment_ci_scale_is_reproducible(tmp_path, capsys, name):
    for sub in ("a", "b"):
        code, _, err = run(["experiment", name, "--scale", "ci", "--reps", 2, "--seed", 3, "--out", tmp_path / sub],
                           capsys)
        assert code == 0, err
    csvs = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert csvs
    for n in csvs:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


@pytest.mark.parametrize("shift", ["none", "logistic"])
def test_federate_matches_fit(files, capsys, shift):
    d, src, tgt = files
    fit_w = _fit(capsys, src, tgt, d / "m.json", "--shift", shift)["weights"]
    code, out, err = run(["federate", src, tgt, "--learner", "linear", "--shift", shift, "--out", d / "f.json",
                          "--transcript", d / "t.jsonl", "--audit", d / "audit.json"], capsys)
    assert code == 0, err
    res = json.loads(out)
    assert res["weights"] == fit_w and res["audit"]["passed"]
    kinds = [json.loads(x)["kind"] for x in open(d / "t.jsonl")]
    assert ("target_covariates" in kinds) == (shift == "logistic")
    assert json.loads((d / "audit.json").read_text())["passed"]


def test_parse_helpers():
    assert parse_split("det") == ("deterministic", None)
    assert parse_split("seed:7") == ("seeded", 7)
    assert parse_split("none") == ("no_split", None)
    with pytest.raises(ValidationError):
        parse_split("seed:x")
    H = parse_h_set("ball:0.5,0.5,0.1", 2)
    assert H.kind == "l2_ball" and H.radius == pytest.approx(0.1 * np.sqrt(2))
    with pytest.raises(ValidationError):
        parse_h_set("point:0.3,0.3", 2)


def test_version_subprocess():
    out = subprocess.run([sys.executable, "-m", "groupdrl.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.startswith("groupdrl ") and "build " in out.stdout

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from logshe import LogSheModel, Dataset, variance_effects
from logshe.cli import main, sha256_file
from logshe.config import build_weights, load_config


def write_cfg(path, **blocks):
    doc = {"seed": 7, "dgp": {"family": "SAR", "theta0": [0.3, 1.0, 3.0, 3.0], "n": 200},
           "estimator": {"methods": ["ml", "ogmm"], "constraint": "rho=0"},
           "mc": {"replications": 2, "master_seed": 11}}
    for k, v in blocks.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Simulated data plus an ML+OGMM fit produced through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d / "cfg.json")
    assert main(["simulate", "--config", cfg, "--out", str(d)]) == 0
    assert main(["fit", "--config", cfg, "--data", str(d / "data.csv"), "--out", str(d)]) == 0
    return d, cfg


def read_json(p):
    return json.loads(p.read_text())


def test_simulate_is_deterministic(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    for sub in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--seed", "1", "--out", str(tmp_path / sub)]) == 0
    assert sha256_file(tmp_path / "a" / "data.csv") == sha256_file(tmp_path / "b" / "data.csv")
    man = read_json(tmp_path / "a" / "simulate_manifest.json")
    assert man["seed"] == 1 and man["files"]["data.csv"] == sha256_file(tmp_path / "a" / "data.csv")


def test_simulate_rejects_inadmissible_rho(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", dgp={"theta0": [1.2, 1.0, 3.0, 3.0]})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "admissible" in capsys.readouterr().err


def test_simulate_durbin_columns(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", dgp={"n_x": 2, "theta0": [0.3, 1.0, 1.0, 1.0, 0.5, 0.5], "n": 50})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    header = (tmp_path / "data.csv").read_text().splitlines()[0].split(",")
    assert header == ["y", "z1", "z2", "z3", "z4", "z5"]


def test_fit_outputs(run):
    d, cfg = run
    doc = read_json(d / "fit.json")
    ml = doc["fits"]["ml"]
    theta, se = np.array(ml["theta"]), np.array(ml["se"])
    assert np.all(np.abs(theta - [0.3, 1.0, 3.0, 3.0]) < 4 * se)
    man = read_json(d / "fit_manifest.json")
    assert man["instruments"]["ogmm"]["Kp"] == 4 and man["instruments"]["ogmm"]["Kq"] == 4


def test_fit_rejects_zero_response(tmp_path, run, capsys):
    d, cfg = run
    lines = (d / "data.csv").read_text().splitlines()
    parts = lines[5].split(",")
    parts[0] = "0.0"
    lines[5] = ",".join(parts)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["fit", "--config", cfg, "--data", str(bad), "--out", str(tmp_path)]) == 1
    assert ":6:" in capsys.readouterr().err


def test_2sml_needs_durbin(tmp_path, run):
    d, _ = run
    cfg = write_cfg(tmp_path / "c.json", dgp={"durbin": False, "theta0": [0.3, 1.0, 3.0, 3.0]},
                    estimator={"methods": ["2sml"]})
    assert main(["fit", "--config", cfg, "--data", str(d / "data.csv"), "--out", str(tmp_path)]) == 1


def test_fit_failure_exit_code(tmp_path, run):
    d, _ = run
    cfg = write_cfg(tmp_path / "c.json", estimator={"methods": ["ml"], "max_iter": 1, "tol": 1e-300})
    assert main(["fit", "--config", cfg, "--data", str(d / "data.csv"), "--out", str(tmp_path)]) == 2
    assert "ml" in read_json(tmp_path / "fit.json")["fits"]


@pytest.mark.parametrize("constraint,c_g", [("rho=0", 1), ("gamma=0", 3), ("gamma[2]=0,gamma[3]=0", 2)])
def test_test_verb(tmp_path, run, constraint, c_g):
    d, _ = run
    cfg = write_cfg(tmp_path / "c.json", estimator={"constraint": constraint})
    rc = main(["test", "--config", cfg, "--data", str(d / "data.csv"), "--fit", str(d / "fit.json"),
               "--out", str(tmp_path)])
    assert rc == 0
    doc = read_json(tmp_path / "tests.json")
    assert doc["c_g"] == c_g
    kinds = [t["kind"] for t in doc["tests"]]
    assert kinds == ["Wald", "LM", "D", "J"]
    assert all(t["df"] == c_g for t in doc["tests"][:3])


def test_test_verb_errors(tmp_path, run):
    d, _ = run
    empty = write_cfg(tmp_path / "e.json", estimator={"constraint": " "})
    args = ["--data", str(d / "data.csv"), "--fit", str(d / "fit.json"), "--out", str(tmp_path)]
    assert main(["test", "--config", empty] + args) == 1
    only2 = tmp_path / "fit2.json"
    only2.write_text(json.dumps({"fits": {"2sml": {"method": "2SML", "theta": [0.3, 1, 3, 3]}}}))
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["test", "--config", cfg, "--data", str(d / "data.csv"), "--fit", str(only2),
                 "--out", str(tmp_path)]) == 1


def test_mc_smoke(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", dgp={"n": 60})
    assert main(["mc", "--config", cfg, "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "mc_estimation.csv").open()))
    assert rows and all(r["reps"] == "2" and np.isfinite(float(r["bias"])) for r in rows)
    assert read_json(tmp_path / "mc_manifest.json")["replications"] == 2


def test_mc_threads_identical(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", dgp={"n": 60}, mc={"replications": 6})
    assert main(["mc", "--config", cfg, "--out", str(tmp_path / "s"), "--threads", "1"]) == 0
    assert main(["mc", "--config", cfg, "--out", str(tmp_path / "p"), "--threads", "3"]) == 0
    assert (tmp_path / "s" / "mc_estimation.csv").read_bytes() == (tmp_path / "p" / "mc_estimation.csv").read_bytes()


def test_bic_select_single_candidate(tmp_path, run):
    d, _ = run
    cfg = write_cfg(tmp_path / "c.json", bic={"families": ["SAR"], "with_x": [True]})
    assert main(["bic-select", "--config", cfg, "--data", str(d / "data.csv"), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "bic.csv").open()))
    assert len(rows) == 1 and rows[0]["family"] == "SAR"
    assert read_json(tmp_path / "bic.json")["best"]["family"] == "SAR"


def test_effects_match_library(tmp_path, run):
    d, cfg = run
    cfg2 = write_cfg(tmp_path / "c.json", variables=["const", "income", "W_income"])
    assert main(["effects", "--config", cfg2, "--data", str(d / "data.csv"), "--fit", str(d / "fit.json"),
                 "--method", "ogmm", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "effects.csv").open()))
    assert rows[0]["variable"] == "income"
    ate, ade, aie = (float(rows[0][k]) for k in ("ate", "ade", "aie"))
    assert aie == ate - ade
    c = load_config(cfg)
    W = build_weights(c.dgp.W, 200, 7)
    data = Dataset.from_csv(d / "data.csv", W, durbin_x=1)
    theta = read_json(d / "fit.json")["fits"]["ogmm"]["theta"]
    ref = variance_effects(LogSheModel.create("SAR", W), data, theta, 1)
    assert ate == ref.ate and ade == ref.ade


def test_effects_zero_spillover(tmp_path, run):
    d, cfg = run
    fit = tmp_path / "fit.json"
    fit.write_text(json.dumps({"fits": {"ml": {"method": "ML", "theta": [0.0, 1.0, 2.0, 0.0]}}}))
    assert main(["effects", "--config", cfg, "--data", str(d / "data.csv"), "--fit", str(fit),
                 "--out", str(tmp_path)]) == 0
    row = next(csv.DictReader((tmp_path / "effects.csv").open()))
    assert abs(float(row["aie"])) < 1e-12


def test_effects_need_durbin(tmp_path, run):
    d, _ = run
    cfg = write_cfg(tmp_path / "c.json", dgp={"durbin": False})
    assert main(["effects", "--config", cfg, "--data", str(d / "data.csv"), "--fit", str(d / "fit.json"),
                 "--out", str(tmp_path)]) == 1


def test_missing_seed_and_data(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dgp": {"n": 20}}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert main(["fit", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "logshe.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("logshe ")

import json
import math

import numpy as np
import pytest

from logshe.config import load_config
from logshe.errors import HarnessError
from logshe.harness import replication_seed, resolve_threads, run_mc


def config(**blocks):
    doc = {"dgp": {"family": "SAR", "theta0": [0.3, 1.0, 3.0, 3.0], "n": 60},
           "estimator": {"methods": ["ml", "ogmm"]}, "mc": {"replications": 2, "master_seed": 5}}
    for k, v in blocks.items():
        doc.setdefault(k, {}).update(v)
    return load_config(text=json.dumps(doc))


def test_smoke_estimation_table():
    table = run_mc(config())
    assert table.replications == 2 and table.kind == "estimation"
    assert len(table.rows) == 2 * 4
    for row in table.rows:
        assert row["reps"] == 2 and math.isfinite(row["bias"]) and row["rmse"] >= abs(row["bias"])
    text = table.to_csv()
    assert text.splitlines()[0].startswith("family,errors,n,method,param")
    assert table.lookup(method="ML", param="rho")


def test_test_mode_adds_null_and_rates_in_range():
    table = run_mc(config(mc={"mode": "test", "rho0": [0.3], "replications": 3}, estimator={"constraint": "rho=0"}))
    assert {r["rho0"] for r in table.rows} == {0.0, 0.3}
    assert {r["test"] for r in table.rows} == {"Wald", "LM", "D"}
    assert all(0.0 <= r["rejection"] <= 1.0 and 0.0 <= r["size_adjusted"] <= 1.0 for r in table.rows)


def test_jtest_mode():
    table = run_mc(config(mc={"mode": "jtest", "replications": 2, "dgps": ["null", "Generalized"]}))
    assert {r["dgp"] for r in table.rows} == {"null", "Generalized"}
    assert all(r["df"] == 4 for r in table.rows)


def test_seed_required():
    cfg = config()
    cfg.mc.master_seed = None
    with pytest.raises(HarnessError):
        run_mc(cfg)


def test_failure_limit(monkeypatch):
    import logshe.harness as h

    monkeypatch.setattr(h, "run_replication", lambda args: (args[1], None))
    with pytest.raises(HarnessError):
        run_mc(config())


def test_replication_seeds_order_free():
    a = np.random.default_rng(replication_seed(7, 3)).random()
    b = np.random.default_rng(replication_seed(7, 3)).random()
    assert a == b and a != np.random.default_rng(replication_seed(7, 4)).random()


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("LOGSHE_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("LOGSHE_THREADS", "3")
    assert resolve_threads(None) == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("LOGSHE_THREADS", "x")
    assert resolve_threads(None) == 1


def test_parallel_matches_serial():
    cfg = config(mc={"replications": 6})
    assert run_mc(cfg, threads=1).to_csv() == run_mc(cfg, threads=3).to_csv()

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import knn_weights
from logshe import LogSheModel, effects_table, mean_effects, simulate, variance_effects, write_effects_csv
from logshe.errors import InvalidArgumentError


def test_mean_effects_trivial_cases():
    W = knn_weights(8, 3)
    e = mean_effects(0.0, 1.7, 0.0, W)
    assert e.ate == pytest.approx(1.7) and e.ade == pytest.approx(1.7) and e.aie == pytest.approx(0.0, abs=1e-14)
    e = mean_effects(0.0, 1.7, 0.6, W)
    assert e.ate == pytest.approx(2.3) and e.ade == pytest.approx(1.7)


def test_mean_effects_match_neumann_series():
    W = knn_weights(6, 2, seed=11)
    e = mean_effects(0.5, 1.2, -0.4, W)
    ate, ade = oracles.neumann_effects(0.5, 1.2, -0.4, W.matrix.tolist())
    assert e.ate == pytest.approx(ate, abs=1e-8) and e.ade == pytest.approx(ade, abs=1e-8)
    assert e.aie == e.ate - e.ade


def test_mean_effects_dense_identity():
    W = knn_weights(10, 3, seed=2)
    S = np.linalg.inv(np.eye(10) - 0.3 * W.matrix) @ (0.8 * np.eye(10) + 0.5 * W.matrix)
    assert mean_effects(0.3, 0.8, 0.5, W).ate == pytest.approx(S.sum() / 10, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        mean_effects(1.0, 1.0, 0.0, W)


def simulated(kind="SAR", n=5, theta=(0.3, 0.4, 0.9, 0.5), X=None, seed=3):
    W = knn_weights(n, 2, seed=seed)
    model = LogSheModel.create(kind, W)
    if X is None:
        X = np.random.default_rng(seed).normal(size=n)
    return model, simulate(model, list(theta), X=X, seed=seed)


def test_variance_effects_trivial_cases():
    model, data = simulated(theta=(0.0, 0.4, 0.9, 0.0))
    e = variance_effects(model, data, [0.0, 0.4, 0.9, 0.0], 1)
    m = np.mean(data.y**2)
    assert e.ate == pytest.approx(0.9 * m) and e.ade == pytest.approx(0.9 * m) and abs(e.aie) < 1e-12
    zero = variance_effects(model, data, [0.3, 0.4, 0.0, 0.0], 1)
    assert zero.ate == zero.ade == zero.aie == 0.0


@pytest.mark.parametrize("kind", ["SAR", "SMA", "SME"])
def test_variance_effects_match_dgp_finite_differences(kind):
    theta = (0.3, 0.4, 0.9, 0.5)
    X = np.random.default_rng(3).normal(size=5)
    model, data = simulated(kind, theta=theta, X=X)
    h = 1e-6
    total = 0.0
    direct = 0.0
    for j in range(5):
        Xp, Xm = X.copy(), X.copy()
        Xp[j] += h
        Xm[j] -= h
        dp = simulate(model, list(theta), X=Xp, seed=3).y ** 2
        dm = simulate(model, list(theta), X=Xm, seed=3).y ** 2
        col = (dp - dm) / (2 * h)
        total += col.sum()
        direct += col[j]
    e = variance_effects(model, data, theta, 1)
    assert e.ate == pytest.approx(total / 5, rel=1e-6)
    assert e.ade == pytest.approx(direct / 5, rel=1e-6)


def test_effects_table_and_csv(tmp_path):
    model, data = simulated(n=30, theta=(0.3, 0.4, 0.9, 0.5))
    rows = effects_table(model, data, [0.3, 0.4, 0.9, 0.5], names=["income"])
    assert rows[0][0] == "income"
    p = tmp_path / "eff.csv"
    write_effects_csv(p, rows)
    lines = p.read_text().splitlines()
    assert lines[0] == "variable,ate,ade,aie" and lines[1].startswith("income,")
    with pytest.raises(InvalidArgumentError):
        variance_effects(model, data, [0.3, 0.4, 0.9, 0.5], 2)


def test_variance_effects_need_durbin():
    W = knn_weights(10, 3)
    model = LogSheModel.create("SAR", W, durbin=False)
    data = simulate(model, [0.3, 0.4, 0.9], seed=1)
    with pytest.raises(InvalidArgumentError):
        variance_effects(model, data, [0.3, 0.4, 0.9], 1)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 500), rho=st.floats(-0.8, 0.8), b=st.floats(-2, 2), bm=st.floats(-2, 2))
def test_effect_invariants(seed, rho, b, bm):
    model, data = simulated(n=12, theta=(0.2, 0.1, 0.5, 0.3), seed=seed)
    theta = [rho, 0.1, b, bm]
    e = variance_effects(model, data, theta, 1)
    assert e.aie == e.ate - e.ade
    perm = np.random.default_rng(seed).permutation(12)
    pm = LogSheModel.create("SAR", model.W.permuted(perm))
    ep = variance_effects(pm, data.permuted(perm), theta, 1)
    assert ep.ate == pytest.approx(e.ate, rel=1e-9, abs=1e-12)

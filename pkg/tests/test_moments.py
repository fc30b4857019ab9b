import math

import numpy as np
import pytest
from scipy import integrate, stats

from logshe import GAUSSIAN_MOMENTS, estimate_moments
from logshe.errors import InvalidArgumentError


def chi2_expect(f):
    """E f(x) for x ~ chi2(1) by adaptive quadrature (split at 1 for the log singularity)."""
    dens = stats.chi2(1).pdf
    a, _ = integrate.quad(lambda x: f(x) * dens(x), 0, 1, limit=200)
    b, _ = integrate.quad(lambda x: f(x) * dens(x), 1, np.inf, limit=200)
    return a + b


def test_degenerate_residuals():
    m = estimate_moments(np.ones(10))
    assert m.a_e == m.c_e == m.d_e == m.b_e == m.sigma2 == 0.0
    assert m.sigma_star2 == 1.0


def test_empty_and_nonpositive():
    with pytest.raises(InvalidArgumentError):
        estimate_moments([])
    with pytest.raises(InvalidArgumentError):
        estimate_moments([1.0, 0.0])


def test_gaussian_identities():
    g = GAUSSIAN_MOMENTS
    assert g.d_e == pytest.approx(2.0, abs=1e-12)
    assert g.d_e_star == pytest.approx(0.0, abs=1e-12)
    assert g.sigma2 == 2 * g.sigma_star2
    assert g.b_e == pytest.approx(-1.2704, abs=1e-3)
    assert estimate_moments([3.0], "gaussian") is g


def test_gaussian_constants_match_quadrature():
    g = GAUSSIAN_MOMENTS
    log = math.log
    checks = {
        "b_e": lambda x: log(x),
        "e_e": lambda x: log(x) ** 2,
        "a_e": lambda x: (x - 1) ** 2 * log(x),
        "c_e": lambda x: (x - 1) ** 2 * log(x) ** 2,
        "d_e": lambda x: (x - 1) * log(x),
        "a_e_star": lambda x: x * log(x),
        "c_e_star": lambda x: x * log(x) ** 2,
        "mu3": lambda x: (x - 1) ** 3,
        "mu4": lambda x: (x - 1) ** 4,
    }
    for name, f in checks.items():
        assert getattr(g, name) == pytest.approx(chi2_expect(f), rel=1e-7, abs=1e-9), name
    assert g.f_e == pytest.approx(g.a_e - g.sigma2 * g.b_e)


def test_sample_mode_converges_to_gaussian():
    v2 = np.random.default_rng(0).standard_normal(1_000_000) ** 2
    m = estimate_moments(v2)
    assert 1.98 <= m.d_e <= 2.02
    assert m.b_e == pytest.approx(GAUSSIAN_MOMENTS.b_e, abs=0.01)
    assert m.sigma2 == pytest.approx(2.0, abs=0.02)


def test_sample_definitions():
    x = np.array([0.5, 1.5, 2.0, 0.1])
    m = estimate_moments(x)
    u, ll = x - 1, np.log(x)
    assert m.a_e == pytest.approx(np.mean(u**2 * ll))
    assert m.d_e_star == pytest.approx(np.mean(u * ll) - 2)
    assert m.f_e_star == pytest.approx(np.mean(x * ll) - np.mean(x) * np.mean(ll))
    assert m.mu3 == pytest.approx(np.mean(u**3))

"""Wald, LM and distance-difference tests of ``G(theta) = 0``, and the J test.

All statistics are built on the optimal GMM machinery of :mod:`logshe.gmm`.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize
from scipy.stats import chi2

from .errors import (
    ConstraintError,
    FitFailedError,
    IncompatibleFitsError,
    InconsistentFitsError,
    LogSheError,
    NotOveridentifiedError,
    UnsupportedMethodError,
)
from .gmm import GMMFit, MomentSystem, _finish_fit, _jacobian, _kernel, _moments_at, compact_box, omega_sigma_R, \
    regularize
from .ml import start_values
from .model import Dataset, LogSheModel, as_vector
from .moments import estimate_moments
from .optim import minimize_theta, polish_newton

__all__ = [
    "Constraint",
    "TestResult",
    "parse_constraint",
    "constrained_ogmm",
    "wald_test",
    "lm_test",
    "d_test",
    "j_test",
]

_RANK_TOL = 1e-10
D_CLAMP = 1e-8


class Constraint:
    """A restriction ``G(theta) = 0`` with ``c_g`` components.

    Use :meth:`linear` for ``J' theta = c`` (analytic jacobian ``J'``) or
    :meth:`nonlinear` for a general map, whose jacobian falls back to
    central differences with step ``1e-6 (1 + |theta_i|)``.
    """

    def __init__(self, fn, c_g: int, jac=None, J=None, c=None, description: str = ""):
        self._fn = fn
        self._jac = jac
        self.c_g = int(c_g)
        self.J = J
        self.c = c
        self.description = description
        if self.c_g < 1:
            raise ConstraintError("a constraint needs at least one component")

    @classmethod
    def linear(cls, J, c=None, description: str = "") -> "Constraint":
        """``J' theta = c`` with ``J`` of shape (K+1, c_g)."""
        J = np.asarray(J, dtype=float)
        if J.ndim == 1:
            J = J[:, None]
        c = np.zeros(J.shape[1]) if c is None else np.atleast_1d(np.asarray(c, dtype=float))
        if c.shape != (J.shape[1],):
            raise ConstraintError("c must have one entry per column of J")
        sv = np.linalg.svd(J, compute_uv=False)
        if sv.size == 0 or sv.min() <= _RANK_TOL * max(1.0, sv.max()):
            raise ConstraintError("J does not have full column rank")
        return cls(lambda th: J.T @ th - c, J.shape[1], jac=lambda th: J.T.copy(), J=J, c=c,
                   description=description or f"linear J'theta=c, c_g={J.shape[1]}")

    @classmethod
    def nonlinear(cls, fn, c_g: int, jac=None, description: str = "") -> "Constraint":
        return cls(lambda th: np.atleast_1d(np.asarray(fn(th), dtype=float)), c_g, jac=jac,
                   description=description or "nonlinear")

    @property
    def is_linear(self) -> bool:
        return self.J is not None

    def __call__(self, theta) -> np.ndarray:
        return self._fn(as_vector(theta))

    def jacobian(self, theta) -> np.ndarray:
        """(c_g, K+1) matrix of derivatives."""
        th = as_vector(theta)
        if self._jac is not None:
            return np.atleast_2d(np.asarray(self._jac(th), dtype=float))
        G = np.empty((self.c_g, th.size))
        for i in range(th.size):
            h = 1e-6 * (1.0 + abs(th[i]))
            e = np.zeros(th.size)
            e[i] = h
            G[:, i] = (self._fn(th + e) - self._fn(th - e)) / (2 * h)
        return G

    def check_rank(self, theta) -> np.ndarray:
        G = self.jacobian(theta)
        sv = np.linalg.svd(G, compute_uv=False)
        if G.shape[0] != self.c_g or sv.min() <= _RANK_TOL:
            raise ConstraintError(f"constraint jacobian is rank deficient (singular values {sv})")
        return G


_TERM = re.compile(r"([+-]?)\s*(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)\s*\*?\s*)?(rho|gamma\s*\[\s*(\d+)\s*\])")


def parse_constraint(text: str, K: int) -> Constraint:
    """Parse ``rho=0``, ``gamma[2]=0,gamma[3]=0``, ``gamma=0`` or linear forms.

    ``gamma[k]`` is 1-based. Each comma-separated equation is a linear
    combination such as ``rho - 0.5*gamma[1] = 0.2``; ``gamma=0`` restricts
    every gamma entry.
    """
    if text is None or not str(text).strip():
        raise ConstraintError("empty constraint")
    cols, cs = [], []
    for eq in str(text).split(","):
        if "=" not in eq:
            raise ConstraintError(f"equation {eq!r} has no '='")
        lhs, rhs = eq.split("=", 1)
        try:
            value = float(rhs)
        except ValueError:
            raise ConstraintError(f"right-hand side {rhs!r} is not a number") from None
        lhs = lhs.strip()
        if re.fullmatch(r"gamma", lhs):
            for k in range(K):
                col = np.zeros(K + 1)
                col[k + 1] = 1.0
                cols.append(col)
                cs.append(value)
            continue
        col = np.zeros(K + 1)
        pos = 0
        for m in _TERM.finditer(lhs):
            if lhs[pos:m.start()].strip():
                raise ConstraintError(f"cannot parse {lhs!r}")
            pos = m.end()
            coef = float(m.group(2)) if m.group(2) else 1.0
            if m.group(1) == "-":
                coef = -coef
            if m.group(3) == "rho":
                col[0] += coef
            else:
                k = int(m.group(4))
                if not 1 <= k <= K:
                    raise ConstraintError(f"gamma[{k}] out of range 1..{K}")
                col[k] += coef
        if pos == 0 or lhs[pos:].strip():
            raise ConstraintError(f"cannot parse {lhs!r}")
        cols.append(col)
        cs.append(value)
    return Constraint.linear(np.column_stack(cols), np.array(cs), description=str(text).strip())


@dataclass
class TestResult:
    """Test statistic with its chi-square reference distribution."""

    __test__ = False  # keep pytest from collecting this class

    kind: str
    statistic: float
    df: int
    p_value: float
    description: str = ""
    instrument_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "constraint": self.description,
            "instrument_hash": self.instrument_hash,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _result(kind, stat, df, description="", ihash="") -> TestResult:
    stat = float(max(stat, 0.0))
    return TestResult(kind, stat, int(df), float(chi2.sf(stat, df)), description, ihash)


def _require_ogmm(fit):
    if not isinstance(fit, GMMFit) or not fit.method.startswith("OGMM"):
        method = getattr(fit, "method", type(fit).__name__)
        raise UnsupportedMethodError(f"tests need an OGMM fit, got {method}")


# ------------------------------------------------------ constrained OGMM
def _affine_map(constraint: Constraint, K1: int):
    """``theta = a + T psi`` for a linear constraint; ``psi[0]`` is rho when free."""
    J, c = constraint.J, constraint.c
    a = np.linalg.lstsq(J.T, c, rcond=None)[0]
    if np.max(np.abs(J.T @ a - c)) > 1e-10 * max(1.0, np.abs(c).max()):
        raise ConstraintError("linear constraint is infeasible")
    N = null_space(J.T)
    if N.shape[1] == 0:
        return a, N, False
    r0 = N[0, :]
    if np.max(np.abs(r0)) <= 1e-12:
        return a, N, False
    # rotate so that only the first free coordinate moves rho, scaled so it equals rho
    H = np.linalg.qr(r0[:, None], mode="complete")[0]
    N = N @ H
    N[:, 1:] -= np.outer(N[:, 0], N[0, 1:] / N[0, 0])
    scale = N[0, 0]
    N[:, 0] /= scale
    # shift so that psi[0] is rho itself
    a = a - N[:, 0] * a[0]
    return a, N, True


def _restricted_start(k, a, T, rho, rho_free):
    """Least squares of ``A(rho) log Y^2`` on Z within the constraint, level fixed so mean v^2 = 1."""
    cols = T[1:, 1:] if rho_free else T[1:]
    offset = a[1:] + (T[1:, 0] * rho if rho_free else 0.0)
    target = k.image.at(rho, 0)[0] - k.Z @ offset
    D = k.Z @ cols
    psi = np.linalg.lstsq(D, target, rcond=None)[0]
    r = target - D @ psi
    mx = r.max()
    level = mx + np.log(np.mean(np.exp(r - mx)))
    delta = np.linalg.lstsq(D, np.full(k.n, level), rcond=None)[0]
    if np.max(np.abs(D @ delta - level)) < 1e-8 * max(1.0, abs(level)):
        psi = psi + delta
    return np.r_[rho, psi] if rho_free else psi


def _grid_starts(k, a, T, interval, value, points: int = 9, keep: int = 2):
    """Restricted least-squares starts over a grid of rho, best ``keep`` by objective."""
    cands = []
    for rho in np.linspace(interval[0], interval[1], points + 2)[1:-1]:
        try:
            s = _restricted_start(k, a, T, rho, True)
            cands.append((value(a + T @ s), s))
        except (LogSheError, np.linalg.LinAlgError, FloatingPointError):
            continue
    cands = [c for c in cands if np.isfinite(c[0])]
    cands.sort(key=lambda c: c[0])
    return [s for _, s in cands[:keep]]


def constrained_ogmm(system: MomentSystem, model: LogSheModel, data: Dataset, constraint: Constraint,
                     unconstrained: GMMFit, tol: float = 1e-6, max_iter: int = 500) -> GMMFit:
    """Minimize the OGMM objective of ``unconstrained`` over ``{G(theta) = 0}``.

    The weighting matrix is taken from ``unconstrained`` so that the D test
    compares objectives with the same weights.
    """
    _require_ogmm(unconstrained)
    k = _kernel(model, data)
    Xi = unconstrained.Xi
    fam = k.family
    lo, hi = fam.interval
    K1 = k.Z.shape[1] + 1
    theta_u = unconstrained.theta

    def value(th):
        R = _moments_at(system, k, th, order=0)[2]
        with np.errstate(over="ignore", invalid="ignore"):
            return float(R @ Xi @ R)

    def grad(th):
        st, pu, R = _moments_at(system, k, th)
        J = _jacobian(system, k, st, pu)
        with np.errstate(over="ignore", invalid="ignore"):
            return float(R @ Xi @ R), 2.0 * (J.T @ (Xi @ R)), J

    if constraint.is_linear:
        if constraint.J.shape[0] != K1:
            raise ConstraintError(f"J must have {K1} rows")
        a, T, rho_free = _affine_map(constraint, K1)
        if T.shape[1] == 0:
            theta = a
            fam.check_rho(theta[0])
            obj, g, _ = grad(theta)
            return _finish_constrained(system, k, theta, Xi, obj, 0.0, True, 0, unconstrained, constraint)
        if not rho_free and not lo < a[0] < hi:
            raise ConstraintError(f"constraint fixes rho={a[0]} outside the admissible interval")
        psi_u = np.linalg.lstsq(T, theta_u - a, rcond=None)[0]
        starts = [psi_u]
        if not rho_free:
            sv = start_values(k, a[0])
            starts.append(np.linalg.lstsq(T, sv - a, rcond=None)[0])
            starts.append(_restricted_start(k, a, T, a[0], False))
        else:
            starts[0][0] = min(max(theta_u[0], lo + 1e-6 * (hi - lo)), hi - 1e-6 * (hi - lo))
            starts += _grid_starts(k, a, T, compact_box((lo, hi)), value)
        vals0 = []
        for s in starts:
            try:
                vals0.append(value(a + T @ s))
            except LogSheError:
                vals0.append(np.inf)
        scale = max(1.0, min(vals0)) if np.isfinite(min(vals0)) else 1.0

        def fun_grad(psi):
            th = a + T @ psi
            f, g, _ = grad(th)
            with np.errstate(over="ignore", invalid="ignore"):
                return f / scale, T.T @ g / scale

        if rho_free:
            interval = compact_box((lo, hi))
            starts[0][0] = min(max(starts[0][0], interval[0]), interval[1])
            best, outs = minimize_theta(fun_grad, starts, interval, max_iter=max_iter, gtol=1e-10)
            psi, iters = best.theta, sum(o.iterations for o in outs)
        else:
            best_val, psi, iters = np.inf, starts[0], 0
            for s in starts:
                try:
                    res = minimize(fun_grad, s, jac=True, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-10})
                except LogSheError:
                    continue
                iters += int(res.nit)
                if res.fun < best_val:
                    best_val, psi = float(res.fun), res.x
            interval = (-np.inf, np.inf)

        def pvalue(p):
            return value(a + T @ p)

        def pgrad(p):
            return T.T @ grad(a + T @ p)[1]

        def ok(p):
            return np.max(np.abs(pgrad(p))) < tol * max(1.0, pvalue(p))

        def newton_step(p):
            g = pgrad(p)
            m = p.size
            H = np.empty((m, m))
            for i in range(m):
                h = 1e-6 * (1.0 + abs(p[i]))
                e = np.zeros(m)
                e[i] = h
                H[:, i] = (pgrad(p + e) - pgrad(p - e)) / (2 * h)
            H = 0.5 * (H + H.T)
            try:
                np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                J = grad(a + T @ p)[2] @ T
                H = 2.0 * J.T @ Xi @ J
            return np.linalg.solve(H, -g)

        if rho_free:
            psi, extra = polish_newton(psi, pvalue, newton_step, ok, interval)
        else:
            psi, extra = polish_newton(np.r_[0.0, psi], lambda q: pvalue(q[1:]),
                                       lambda q: np.r_[0.0, newton_step(q[1:])],
                                       lambda q: ok(q[1:]), interval)
            psi = psi[1:]
        theta = a + T @ psi
        gnorm = float(np.max(np.abs(pgrad(psi))))
        obj = pvalue(psi)
        converged = bool(gnorm < tol * max(1.0, obj))
        return _finish_constrained(system, k, theta, Xi, obj, gnorm, converged, iters + extra, unconstrained,
                                   constraint)
    return _constrained_nonlinear(system, k, constraint, unconstrained, value, grad, tol, max_iter)


def _constrained_nonlinear(system, k, constraint, unconstrained, value, grad, tol, max_iter):
    lo, hi = k.family.interval
    eps = 1e-6 * (hi - lo)
    theta0 = unconstrained.theta
    scale = max(1.0, value(theta0))

    def f(th):
        try:
            v, g, _ = grad(th)
        except LogSheError:
            return 1e30, np.zeros_like(th)
        return v / scale, g / scale

    bounds = [(lo + eps, hi - eps)] + [(None, None)] * (theta0.size - 1)
    cons = [{"type": "eq", "fun": constraint, "jac": constraint.jacobian}]
    res = minimize(f, theta0, jac=True, method="SLSQP", bounds=bounds, constraints=cons,
                   options={"maxiter": max_iter, "ftol": 1e-14})
    theta = res.x
    feas = float(np.max(np.abs(constraint(theta))))
    obj = value(theta)
    # stationarity of the Lagrangian: gradient orthogonal to the constraint tangent space
    _, g, _ = grad(theta)
    G = constraint.jacobian(theta)
    lam = np.linalg.lstsq(G.T, g, rcond=None)[0]
    gnorm = float(np.max(np.abs(g - G.T @ lam)))
    converged = bool(feas < 1e-8 and gnorm < max(tol, 1e-5) * max(1.0, obj))
    return _finish_constrained(system, k, theta, unconstrained.Xi, obj, gnorm, converged, int(res.nit),
                               unconstrained, constraint)


def _finish_constrained(system, k, theta, Xi, obj, gnorm, converged, iters, unconstrained, constraint):
    fit = _finish_fit(system, k, theta, Xi, obj, gnorm, converged, iters, "OGMM-constrained",
                      covariance=False, moment_mode="sample")
    fit.info["constraint"] = constraint.description
    fit.info["c_g"] = constraint.c_g
    fit.stage1 = unconstrained.stage1
    if not converged:
        raise FitFailedError(f"constrained OGMM did not converge: gradient {gnorm:.3g}", best=fit)
    return fit


# ----------------------------------------------------------------- tests
def wald_test(fit: GMMFit, constraint: Constraint) -> TestResult:
    """``G(theta)' (G_dot V G_dot')^{-1} G(theta)`` at the unconstrained OGMM estimate.

    ``V = (S' Omega_R^{-1} S)^{-1}`` with ``S`` the sample Jacobian of the
    moments at the estimate. The plug-in expectation of that Jacobian is
    noisier in finite samples and over-rejects.
    """
    _require_ogmm(fit)
    th = fit.theta
    G = constraint.check_rank(th)
    g = constraint(th)
    om, _ = regularize(fit.omega_R_hat)
    S = fit.jacobian_hat if fit.jacobian_hat is not None else fit.sigma_R_hat
    V = np.linalg.inv(S.T @ np.linalg.solve(om, S))
    stat = float(g @ np.linalg.solve(G @ V @ G.T, g))
    return _result("Wald", stat, constraint.c_g, constraint.description, fit.instrument_hash)


def lm_test(cfit: GMMFit, system: MomentSystem, model: LogSheModel, data: Dataset,
            constraint: Constraint) -> TestResult:
    """Score-type test from the moments at the constrained estimate.

    ``R' Om^{-1} S (S' Om^{-1} S)^{-1} S' Om^{-1} R`` with ``R``, ``S`` and
    ``Om`` all re-evaluated at the constrained estimate, including its own
    moment set. ``S`` is the sample Jacobian of the moments, which keeps the
    first-order conditions of the constrained fit: only the restricted
    directions contribute.
    """
    _require_ogmm(cfit)
    k = _kernel(model, data)
    th = cfit.theta
    constraint.check_rank(th)
    st, pu, R = _moments_at(system, k, th)
    S = _jacobian(system, k, st, pu)
    moments = estimate_moments(st.v2, "sample")
    omega, _ = omega_sigma_R(system, k, data, th, moments)
    om, _ = regularize(omega)
    oR = np.linalg.solve(om, R)
    oS = np.linalg.solve(om, S)
    mid = S.T @ oR
    stat = float(mid @ np.linalg.solve(S.T @ oS, mid))
    return _result("LM", stat, constraint.c_g, constraint.description, cfit.instrument_hash)


def d_test(cfit: GMMFit, ufit: GMMFit, c_g: int | None = None) -> TestResult:
    """Objective difference ``D(theta_c) - D(theta_hat)`` under shared weights.

    Raises
    ------
    IncompatibleFitsError
        If the two fits do not share instruments and weighting matrix.
    InconsistentFitsError
        If the difference is below ``-1e-8``.
    """
    _require_ogmm(cfit)
    _require_ogmm(ufit)
    if cfit.weight_hash != ufit.weight_hash or cfit.instrument_hash != ufit.instrument_hash:
        raise IncompatibleFitsError("D test needs fits sharing the same weighting matrix and instruments")
    stat = cfit.objective - ufit.objective
    if stat < -D_CLAMP:
        raise InconsistentFitsError(f"constrained objective is below the unconstrained one by {-stat:.3g}")
    if c_g is None:
        if "c_g" not in cfit.info:
            raise ConstraintError("the constrained fit does not record c_g; pass it explicitly")
        c_g = int(cfit.info["c_g"])
    return _result("D", max(stat, 0.0), c_g, cfit.info.get("constraint", ""), ufit.instrument_hash)


def j_test(fit: GMMFit, system: MomentSystem) -> TestResult:
    """Overidentification statistic ``R' Omega_R^{-1} R`` at the OGMM estimate."""
    _require_ogmm(fit)
    K1 = fit.theta.size
    df = system.n_moments - K1
    if df <= 0:
        raise NotOveridentifiedError(f"{system.n_moments} moments for {K1} parameters; J test needs more moments")
    om, _ = regularize(fit.omega_R_hat)
    R = fit.moment_values
    stat = float(R @ np.linalg.solve(om, R))
    return _result("J", stat, df, "overidentifying restrictions", fit.instrument_hash)

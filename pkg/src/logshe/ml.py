"""Gaussian quasi-maximum likelihood for the log-SHE model, and two-step ML.

The log-likelihood is

    log L(theta) = -1/2 sum_i (log 2 pi + v_i^2(theta) + log h_i(theta)) + log det A(rho)

with ``v_i^2 = exp([A log Y^2]_i - Z_i' gamma)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DegenerateFitError, FitFailedError, InvalidArgumentError, LogSheError
from .model import Dataset, Kernel, LogSheModel, as_vector
from .moments import MomentSet, estimate_moments
from .optim import BOUNDARY_W, minimize_theta, polish_newton, to_free
from .results import FitResult

__all__ = [
    "MLFit",
    "log_likelihood",
    "score",
    "hessian",
    "ml_sandwich",
    "fit_ml",
    "fit_2sml",
    "consistency_diagnostic",
    "start_values",
]

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(kw_only=True)
class MLFit(FitResult):
    """ML or 2SML fit. ``residual_v2`` holds ``v^2(theta_hat)``."""

    score_norm_at_opt: float = float("nan")
    residual_v2: np.ndarray | None = None
    omega: np.ndarray | None = None
    sigma: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["score_norm_at_opt"] = self.score_norm_at_opt if np.isfinite(self.score_norm_at_opt) else None
        d["diagnostics"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.diagnostics.items()}
        return d


def _kernel(model, data) -> Kernel:
    return model if isinstance(model, Kernel) else Kernel(model, data)


# ---------------------------------------------------------------- pieces
def _loglik(k: Kernel, theta) -> float:
    st = k.state(theta, order=0)
    ld = k.family.log_det(st.theta[0], 0)
    return float(-0.5 * (k.n * _LOG2PI + st.v2.sum() + k.logy2.sum() - st.expo.sum()) + ld)


def _score(k: Kernel, theta, st=None) -> np.ndarray:
    st = st or k.state(theta, order=1)
    u = st.u
    s_rho = -0.5 * st.eta @ u + k.family.log_det(st.theta[0], 1)
    return np.r_[s_rho, 0.5 * (k.Z.T @ u)]


def _hessian(k: Kernel, theta, st=None) -> np.ndarray:
    st = st or k.state(theta, order=2)
    Z = k.Z
    v2eta = st.v2 * st.eta
    K = Z.shape[1]
    H = np.empty((K + 1, K + 1))
    H[0, 0] = -0.5 * st.eta @ v2eta - 0.5 * st.eta2 @ st.u + k.family.log_det(st.theta[0], 2)
    H[0, 1:] = H[1:, 0] = 0.5 * (Z.T @ v2eta)
    G = (Z.T * st.v2) @ Z
    H[1:, 1:] = -0.25 * (G + G.T)
    return H


def log_likelihood(model: LogSheModel, data: Dataset, theta) -> float:
    """Gaussian log-likelihood at ``theta``.

    Raises
    ------
    DeterminantSignError
        If ``det A(rho)`` is not positive.
    NonFiniteVarianceError
        If some ``h_i`` overflows.
    """
    k = _kernel(model, data)
    k.state(theta, order=0, strict=True)
    return _loglik(k, theta)


def score(model: LogSheModel, data: Dataset, theta) -> np.ndarray:
    """Analytic gradient of :func:`log_likelihood` (rho first)."""
    k = _kernel(model, data)
    k.state(theta, order=0, strict=True)
    return _score(k, theta)


def hessian(model: LogSheModel, data: Dataset, theta) -> np.ndarray:
    """Analytic Hessian of :func:`log_likelihood`.

    The rho-rho entry is ``-1/2 eta' diag(v^2) eta - 1/2 (A_ddot log Y^2)'(v^2 - 1)``
    plus the second derivative of ``log det A``, which equals
    ``tr(A_ddot A_inv) - tr((A_dot A_inv)^2)``.
    """
    k = _kernel(model, data)
    k.state(theta, order=0, strict=True)
    return _hessian(k, theta)


# ------------------------------------------------------------ covariance
def ml_sandwich(k: Kernel, theta, moments: MomentSet):
    """Expected score variance ``Omega`` and information ``Sigma`` at ``theta``.

    Both are totals over units (not divided by n). The covariance of the
    estimator is ``Sigma^{-1} Omega Sigma^{-1}``.
    """
    th = as_vector(theta)
    rho, gamma = th[0], th[1:]
    fam = k.family
    Z = k.Z
    n = k.n
    m = moments
    B = fam.adot_ainv(rho)
    C = fam.addot_ainv(rho)
    delta = np.diag(B).copy()
    g = B @ (Z @ gamma + m.b_e)
    tr_BBt = float(np.sum(B * B))
    tr_B2 = float(np.sum(B * B.T))
    dd = float(delta @ delta)
    var_l = m.e_e - m.b_e**2
    K = Z.shape[1]

    kappa = m.c_e - 2 * m.a_e * m.b_e + 2 * m.sigma2 * m.b_e**2 - m.sigma2 * m.e_e - 2 * m.d_e**2
    var_t = (m.sigma2 * (g @ g) + 2 * m.f_e * (g @ delta) + kappa * dd
             + m.sigma2 * var_l * tr_BBt + m.d_e**2 * tr_B2)
    omega = np.empty((K + 1, K + 1))
    omega[0, 0] = 0.25 * var_t
    omega[0, 1:] = omega[1:, 0] = -0.25 * (m.sigma2 * g + m.f_e * delta) @ Z
    omega[1:, 1:] = 0.25 * m.sigma2 * (Z.T @ Z)

    s1 = (m.sigma_star2 * (g @ g) + 2 * m.f_e_star * (g @ delta)
          + (m.c_e_star - 2 * m.b_e * m.a_e_star + 2 * m.sigma_star2 * m.b_e**2 - m.sigma_star2 * m.e_e) * dd
          + m.sigma_star2 * var_l * tr_BBt)
    sigma = np.empty((K + 1, K + 1))
    sigma[0, 0] = 0.5 * s1 + 0.5 * m.d_e * float(np.trace(C)) - fam.log_det(rho, 2)
    sigma[0, 1:] = sigma[1:, 0] = -0.5 * (m.sigma_star2 * g + m.f_e_star * delta) @ Z
    sigma[1:, 1:] = 0.5 * m.sigma_star2 * (Z.T @ Z)
    return omega, sigma, n


def _sandwich_cov(omega, sigma):
    try:
        si = np.linalg.inv(sigma)
    except np.linalg.LinAlgError:
        return None
    cov = si @ omega @ si.T
    return 0.5 * (cov + cov.T)


# --------------------------------------------------------------- fitting
def _constant_column(Z) -> int | None:
    for j in range(Z.shape[1]):
        col = Z[:, j]
        if col[0] != 0 and np.all(col == col[0]):
            return j
    return None


def start_values(k: Kernel, rho: float) -> np.ndarray:
    """OLS of ``A(rho) log Y^2`` on Z, intercept shifted so that mean v^2 = 1."""
    a = k.image.at(rho, 0)[0]
    gamma, *_ = np.linalg.lstsq(k.Z, a, rcond=None)
    j = _constant_column(k.Z)
    if j is not None:
        r = a - k.Z @ gamma
        mx = r.max()
        gamma[j] += (mx + math.log(np.mean(np.exp(r - mx)))) / k.Z[0, j]
    return np.r_[rho, gamma]


def _log_linear_profile(k: Kernel):
    """Concentrated Gaussian objective of the regression of ``A(rho) log Y^2`` on Z."""
    fam, n = k.family, k.n
    Q, _ = np.linalg.qr(k.Z)

    def ssr(rho):
        a = k.image.at(rho, 0)[0]
        r = a - Q @ (Q.T @ a)
        return float(r @ r)

    def profile(rho):
        try:
            s = ssr(rho)
            if s <= 0:
                return np.inf
            return 0.5 * n * math.log(s / n) - fam.log_det(rho, 0)
        except LogSheError:
            return np.inf

    return ssr, profile


def _profile_grid(k: Kernel, profile, points: int = 41):
    lo, hi = k.family.interval
    eps = 1e-6 * (hi - lo)
    grid = np.linspace(lo + eps, hi - eps, points)
    with np.errstate(all="ignore"):
        vals = np.array([profile(r) for r in grid])
    return grid, vals


def _default_starts(k: Kernel, n_starts: int):
    """Grid starts around zero plus the log-linear profile estimate of rho."""
    lo, hi = k.family.interval
    grid = [0.0, 0.3, -0.3, 0.6, -0.6][: max(1, n_starts)]
    grid = sorted(grid, key=lambda r: abs(r))
    rhos = [min(max(r, lo + 0.05 * (hi - lo)), hi - 0.05 * (hi - lo)) for r in grid]
    if n_starts > 1 and _constant_column(k.Z) is not None:
        _, profile = _log_linear_profile(k)
        g, vals = _profile_grid(k, profile)
        if np.isfinite(vals).any():
            r = float(g[int(np.argmin(vals))])
            r = min(max(r, lo + 0.01 * (hi - lo)), hi - 0.01 * (hi - lo))
            if min(abs(r - q) for q in rhos) > 0.05:
                rhos.append(r)
    return [start_values(k, r) for r in rhos]


def fit_ml(model: LogSheModel, data: Dataset, start=None, tol: float = 1e-6, max_iter: int = 500,
           moment_mode="sample", n_starts: int = 3, covariance: bool = True) -> MLFit:
    """Maximize the Gaussian log-likelihood.

    Parameters
    ----------
    start : array_like, optional
        Starting theta. Without it ``n_starts`` OLS-based starts are used,
        at rho in {0, 0.3, -0.3} clipped into the admissible interval.
    tol : float
        Converged when ``max|score| < tol * max(1, |loglik|)``.
    moment_mode : {"sample", "gaussian"}
        Moments plugged into the sandwich covariance.

    Raises
    ------
    FitFailedError
        When the optimizer does not reach the tolerance; ``best`` holds the
        best iterate as an :class:`MLFit`.
    """
    k = _kernel(model, data)
    interval = k.family.interval
    n = k.n
    if start is not None:
        starts = [as_vector(start)]
        k.family.check_rho(starts[0][0])
    else:
        starts = _default_starts(k, n_starts)

    def fun_grad(th):
        st = k.state(th, order=1)
        ll = _loglik(k, th)
        return -ll / n, -_score(k, th, st) / n

    best, outcomes = minimize_theta(fun_grad, starts, interval, max_iter=max_iter)
    iters = sum(o.iterations for o in outcomes)

    def ok(th):
        ll = _loglik(k, th)
        return np.max(np.abs(_score(k, th))) < tol * max(1.0, abs(ll))

    def newton_step(th):
        H = _hessian(k, th)
        s = _score(k, th)
        step = np.linalg.solve(H, -s)
        # fall back to a scaled gradient step when H is not negative definite
        if s @ step <= 0:
            step = s / max(1.0, np.abs(np.diag(H)).max())
        return step

    theta, polish_iters = polish_newton(best.theta, lambda th: -_loglik(k, th), newton_step, ok, interval)
    iters += polish_iters
    ll = _loglik(k, theta)
    s = _score(k, theta)
    snorm = float(np.max(np.abs(s)))
    converged = bool(snorm < tol * max(1.0, abs(ll)))
    st = k.state(theta, order=0)
    v2 = st.v2
    warns = []
    w = to_free(theta, interval)[0]
    if abs(w) > BOUNDARY_W:
        warns.append("boundary: rho estimate is close to the edge of the admissible interval")
    moments = estimate_moments(v2, moment_mode)
    fit = MLFit(method="ML", theta=theta, covariance=None, converged=converged, iterations=iters,
                moments=moments, loglik=ll, warnings=warns, score_norm_at_opt=snorm, residual_v2=v2,
                info={"family": k.family.kind.value, "n": n, "starts": len(starts), "moment_mode": str(moment_mode)})
    if covariance:
        omega, sigma, _ = ml_sandwich(k, theta, moments)
        fit.omega, fit.sigma = omega, sigma
        fit.covariance = _sandwich_cov(omega, sigma)
        if fit.covariance is None:
            fit.warnings.append("information matrix is singular; covariance unavailable")
    fit.diagnostics = consistency_diagnostic(fit, k.family, data)
    if not converged:
        raise FitFailedError(f"ML did not converge: max|score|={snorm:.3g}", best=fit)
    return fit


def consistency_diagnostic(fit: FitResult, family, data: Dataset) -> dict:
    """The two terms whose vanishing ML consistency requires.

    ``term1 = (mean((1 - v^2) log v^2) + 2) tr(A_dot A_inv)/n`` and
    ``term2 = mean(v^2 - 1) Z'1/n``. A clearly nonzero ``term1`` signals that
    the Gaussian likelihood is inconsistent for the error distribution.
    """
    th = fit.theta
    v2 = getattr(fit, "residual_v2", None)
    if v2 is None:
        k = Kernel(LogSheModel(family, durbin=False), data)
        v2 = k.state(th, order=0).v2
    n = v2.size
    trace = family.log_det(th[0], 1)
    lv = np.log(v2)
    term1 = (float(np.mean((1.0 - v2) * lv)) + 2.0) * trace / n
    term2 = float(np.mean(v2 - 1.0)) * data.Z.sum(axis=0) / n
    return {"term1": term1, "term2": term2}


# ------------------------------------------------------------------ 2SML
def fit_2sml(model: LogSheModel, data: Dataset, xatol: float = 1e-10) -> MLFit:
    """Two-step ML on the log-linearized model.

    Step 1 profiles the Gaussian likelihood of ``A(rho) log Y^2`` regressed
    on ``(1, X, W X)`` over rho. Step 2 sets the intercept to
    ``log mean exp(C_i)`` with ``C = A(rho) log Y^2 - X beta - W X beta_m``.
    No covariance is produced.
    """
    if not model.durbin:
        raise InvalidArgumentError("2SML requires the Durbin layout")
    k = _kernel(model, data)
    fam = k.family
    Z = k.Z
    n = k.n
    j = _constant_column(Z)
    if j is None:
        raise InvalidArgumentError("2SML needs an intercept column in Z")
    ssr, profile = _log_linear_profile(k)
    grid, vals = _profile_grid(k, profile)
    i = int(np.argmin(vals))
    a_, b_ = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(profile, bounds=(a_, b_), method="bounded", options={"xatol": xatol})
    rho = float(res.x) if res.fun <= vals[i] else float(grid[i])
    s = ssr(rho)
    if not s > 0:
        raise DegenerateFitError("residual variance of the log-linear regression is zero")
    a = k.image.at(rho, 0)[0]
    coef, *_ = np.linalg.lstsq(Z, a, rcond=None)
    slopes = np.delete(np.arange(Z.shape[1]), j)
    C = a - Z[:, slopes] @ coef[slopes]
    mx = C.max()
    alpha = (mx + math.log(np.mean(np.exp(C - mx)))) / Z[0, j]
    gamma = coef.copy()
    gamma[j] = alpha
    theta = np.r_[rho, gamma]
    v2 = k.state(theta, order=0).v2
    fit = MLFit(method="2SML", theta=theta, covariance=None, converged=bool(res.success), iterations=int(res.nfev),
                moments=estimate_moments(v2), loglik=_loglik(k, theta), residual_v2=v2,
                info={"family": fam.kind.value, "n": n, "sigma_tilde2": s / n, "c_e": float(coef[j])})
    return fit

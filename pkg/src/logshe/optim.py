"""Quasi-Newton minimization over theta with rho kept inside its interval.

rho is mapped to an unconstrained coordinate ``w`` by
``rho = lo + (hi - lo) / (1 + exp(-w))``; gamma is left as is.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .errors import LogSheError

__all__ = ["to_free", "to_theta", "minimize_theta", "polish_newton", "OptOutcome"]

_W_CLIP = 30.0
_PENALTY = 1e30
BOUNDARY_W = 6.0


def to_free(theta, interval) -> np.ndarray:
    lo, hi = interval
    th = np.asarray(theta, dtype=float)
    p = (th[0] - lo) / (hi - lo)
    p = min(max(p, 1e-12), 1 - 1e-12)
    return np.r_[logit(p), th[1:]]


def to_theta(x, interval) -> np.ndarray:
    lo, hi = interval
    w = float(np.clip(x[0], -_W_CLIP, _W_CLIP))
    rho = lo + (hi - lo) * expit(w)
    # keep strictly interior after rounding
    rho = min(max(rho, np.nextafter(lo, hi)), np.nextafter(hi, lo))
    return np.r_[rho, np.asarray(x[1:], dtype=float)]


def _drho_dw(x, interval) -> float:
    lo, hi = interval
    s = expit(float(np.clip(x[0], -_W_CLIP, _W_CLIP)))
    return (hi - lo) * s * (1.0 - s)


@dataclass
class OptOutcome:
    theta: np.ndarray
    fun: float
    iterations: int
    success: bool
    w: float
    message: str = ""


def _initial_inverse(hess_fn, x0, interval):
    """Inverse of a positive definite Hessian guess, mapped to free coordinates."""
    try:
        H = np.asarray(hess_fn(to_theta(x0, interval)), dtype=float)
    except (LogSheError, np.linalg.LinAlgError):
        return None
    d = np.ones(x0.size)
    d[0] = _drho_dw(x0, interval)
    Hf = d[:, None] * H * d[None, :]
    Hf = 0.5 * (Hf + Hf.T)
    try:
        L = np.linalg.cholesky(Hf)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    Hi = Linv.T @ Linv
    w = np.linalg.eigvalsh(0.5 * (Hi + Hi.T)) if np.all(np.isfinite(Hi)) else np.array([-1.0])
    if w[0] <= 0 or w[-1] > 1e12 * w[0]:
        return None
    return 0.5 * (Hi + Hi.T)


def minimize_theta(fun_grad, starts, interval, max_iter: int = 500, gtol: float = 1e-8,
                   hess_fn=None) -> tuple[OptOutcome, list]:
    """Minimize ``fun_grad(theta) -> (value, gradient)`` from several starts.

    Returns the best outcome and the list of all outcomes. Evaluation errors
    from the model (overflow, singular operators) are treated as a large
    penalty so the line search backs off. ``hess_fn(theta)``, if given,
    supplies a positive definite Hessian guess whose inverse seeds BFGS, so
    the first steps stay local instead of following the raw gradient.
    """
    def wrapped(x):
        th = to_theta(x, interval)
        try:
            f, g = fun_grad(th)
        except LogSheError:
            return _PENALTY, np.zeros_like(x)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return _PENALTY, np.zeros_like(x)
        g = np.array(g, dtype=float)
        g[0] *= _drho_dw(x, interval)
        return f, g

    outcomes = []
    for start in starts:
        x0 = to_free(start, interval)
        opts = {"maxiter": max_iter, "gtol": gtol}
        if hess_fn is not None:
            Hi = _initial_inverse(hess_fn, x0, interval)
            if Hi is not None:
                opts["hess_inv0"] = Hi
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(wrapped, x0, jac=True, method="BFGS", options=opts)
        outcomes.append(OptOutcome(to_theta(res.x, interval), float(res.fun), int(res.nit),
                                   bool(res.success), float(res.x[0]), str(res.message)))
    best = min(outcomes, key=lambda o: o.fun)
    return best, outcomes


def polish_newton(theta, value_fn, step_fn, check_fn, interval, max_steps: int = 30):
    """Refine a minimizer with (quasi-)Newton steps and backtracking.

    ``step_fn(theta)`` returns a descent step, ``value_fn`` the objective and
    ``check_fn(theta)`` whether the stationarity tolerance is met. A step
    that raises the objective by no more than rounding noise is accepted,
    since near the optimum the decrease is below machine precision. Returns
    ``(theta, steps_taken)``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _polish(theta, value_fn, step_fn, check_fn, interval, max_steps)


def _polish(theta, value_fn, step_fn, check_fn, interval, max_steps):
    lo, hi = interval
    th = np.asarray(theta, dtype=float)
    try:
        f0 = value_fn(th)
    except LogSheError:
        return th, 0
    for k in range(max_steps):
        if check_fn(th):
            return th, k
        try:
            step = step_fn(th)
        except (LogSheError, np.linalg.LinAlgError):
            return th, k
        if step is None or not np.all(np.isfinite(step)):
            return th, k
        t = 1.0
        moved = False
        for _ in range(30):
            cand = th + t * step
            if lo < cand[0] < hi:
                try:
                    f1 = value_fn(cand)
                except LogSheError:
                    f1 = np.inf
                if f1 <= f0 + 64 * np.finfo(float).eps * max(1.0, abs(f0)):
                    th, f0, moved = cand, f1, True
                    break
            t *= 0.5
        if not moved:
            return th, k
    return th, max_steps

"""GMM and optimal GMM estimation from quadratic and linear moments.

With ``u = v^2(theta) - 1`` the moment vector is

    R(theta) = (u' P_1 u, ..., u' P_Kp u, u' Q)'

where every ``P_s`` has zero trace. GMM minimizes ``R' Xi R``; OGMM uses
the inverse of the estimated moment covariance as ``Xi``.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .errors import FitFailedError, InstrumentRankError, InvalidArgumentError, LogSheError
from .ml import _default_starts, _kernel
from .model import Dataset, Kernel, LogSheModel, as_vector
from .moments import MomentSet, estimate_moments
from .optim import BOUNDARY_W, minimize_theta, polish_newton, to_free
from .results import FitResult, to_jsonable
from .weights import WeightMatrix

__all__ = [
    "MomentSystem",
    "GMMFit",
    "default_instruments",
    "moment_vector",
    "moment_jacobian",
    "omega_sigma_R",
    "fit_gmm",
    "fit_ogmm",
    "regularize",
]

_TRACE_TOL = 1e-10


def _ewsum(a, b) -> float:
    """``sum(a * b)`` for any mix of dense and sparse operands."""
    if sparse.issparse(a):
        return float(a.multiply(b).sum())
    if sparse.issparse(b):
        return float(b.multiply(a).sum())
    return float(np.sum(a * b))


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = a.toarray() if sparse.issparse(a) else np.asarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


class MomentSystem:
    """Instrument matrices ``P_1..P_Kp`` (zero trace), ``Q`` and weighting ``Xi``.

    Parameters
    ----------
    P_list : sequence of (n, n) arrays or sparse matrices
    Q : (n, Kq) array or None
    Xi : (Kp+Kq, Kp+Kq) array, optional
        Defaults to the identity.
    """

    def __init__(self, P_list, Q=None, Xi=None, *, _powers=None):
        self.P_list = [p.tocsr() if sparse.issparse(p) else np.asarray(p, dtype=float) for p in P_list]
        n = None
        for s, p in enumerate(self.P_list):
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise InvalidArgumentError(f"P_{s + 1} must be square")
            n = n or p.shape[0]
            if p.shape[0] != n:
                raise InvalidArgumentError("all P matrices must have the same size")
            tr = float(p.diagonal().sum())
            if abs(tr) >= _TRACE_TOL * max(1.0, n):
                raise InvalidArgumentError(f"P_{s + 1} has trace {tr:.3g}; quadratic moments need zero trace")
        if Q is None:
            Q = np.zeros((n or 0, 0))
        Q = np.asarray(Q, dtype=float)
        if Q.ndim == 1:
            Q = Q[:, None]
        if n is not None and Q.shape[1] and Q.shape[0] != n:
            raise InvalidArgumentError("Q has the wrong number of rows")
        if Q.shape[1] and np.linalg.matrix_rank(Q) < Q.shape[1]:
            raise InstrumentRankError(f"Q (n x {Q.shape[1]}) is rank deficient")
        self.Q = Q
        self.n = n if n is not None else Q.shape[0]
        if self.n == 0:
            raise InvalidArgumentError("moment system is empty")
        m = self.n_moments
        if Xi is None:
            Xi = np.eye(m)
        Xi = np.asarray(Xi, dtype=float)
        if Xi.shape != (m, m):
            raise InvalidArgumentError(f"Xi must be {m}x{m}")
        if not np.allclose(Xi, Xi.T, rtol=1e-10, atol=1e-12 * np.abs(Xi).max()):
            raise InvalidArgumentError("Xi must be symmetric")
        try:
            np.linalg.cholesky(Xi)
        except np.linalg.LinAlgError:
            raise InvalidArgumentError("Xi must be positive definite") from None
        self.Xi = Xi
        self._powers = _powers

    @property
    def Kp(self) -> int:
        return len(self.P_list)

    @property
    def Kq(self) -> int:
        return self.Q.shape[1]

    @property
    def n_moments(self) -> int:
        return self.Kp + self.Kq

    def with_weighting(self, Xi) -> "MomentSystem":
        return MomentSystem(self.P_list, self.Q, Xi, _powers=self._powers)

    @cached_property
    def instrument_hash(self) -> str:
        return _hash_arrays(*self.P_list, self.Q)

    @cached_property
    def diagonals(self) -> np.ndarray:
        """(n, Kp) matrix whose columns are the diagonals of the ``P_s``."""
        if not self.Kp:
            return np.zeros((self.n, 0))
        return np.column_stack([p.diagonal() for p in self.P_list])

    def pstar_apply(self, u: np.ndarray) -> np.ndarray:
        """(n, Kp) matrix with columns ``(P_s + P_s') u``."""
        if not self.Kp:
            return np.zeros((u.size, 0))
        if self._powers is not None:
            Ws, WsT, centers = self._powers
            out = np.empty((u.size, self.Kp))
            a = u
            b = u
            for s in range(self.Kp):
                a = Ws @ a
                b = WsT @ b
                out[:, s] = a + b - 2.0 * centers[s] * u
            return out
        return np.column_stack([p @ u + p.T @ u for p in self.P_list])

    def manifest(self) -> dict:
        return {
            "Kp": self.Kp,
            "Kq": self.Kq,
            "instrument_hash": self.instrument_hash,
            "P": "centered powers of W" if self._powers is not None else "user supplied",
        }


def default_instruments(W: WeightMatrix, Z, kappa_max: int = 4, X=None) -> MomentSystem:
    """Centered powers ``P_k = W^k - tr(W^k)/n I`` and linear instruments.

    ``Q`` is ``(1, X, W X, W^2 X)`` when the exogenous block ``X`` of a
    Durbin design is given, otherwise ``(Z, W Z)`` without the columns
    ``W c`` of constant columns ``c`` (which reproduce ``c``).
    """
    if not 1 <= int(kappa_max) <= 6:
        raise InvalidArgumentError("kappa_max must be between 1 and 6")
    n = W.n
    Ws = W.sparse
    P_list = []
    centers = []
    Wk = sparse.identity(n, format="csr")
    for _ in range(int(kappa_max)):
        Wk = (Wk @ Ws).tocsr()
        c = float(Wk.diagonal().sum()) / n
        centers.append(c)
        P_list.append((Wk - c * sparse.identity(n, format="csr")).tocsr())
    if X is not None:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        WX = Ws @ X
        Q = np.column_stack([np.ones(n), X, WX, Ws @ WX])
    else:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        lagged = [Ws @ Z[:, j] for j in range(Z.shape[1]) if not np.all(Z[:, j] == Z[0, j])]
        Q = np.column_stack([Z] + lagged) if lagged else Z
    wt = Ws.T.tocsr()
    return MomentSystem(P_list, Q, _powers=(Ws, wt, centers))


def _check_system(system: MomentSystem, data: Dataset):
    if system.n != data.n:
        raise InvalidArgumentError("moment system and data sizes differ")


def _moments_at(system: MomentSystem, k: Kernel, theta, order: int = 1):
    st = k.state(theta, order=order)
    u = st.u
    # trial points far from the optimum can overflow; callers treat non-finite values as a penalty
    with np.errstate(over="ignore", invalid="ignore"):
        pu = system.pstar_apply(u)
        R = np.r_[0.5 * (u @ pu), system.Q.T @ u]
    return st, pu, R


def _jacobian(system: MomentSystem, k: Kernel, st, pu) -> np.ndarray:
    Z = k.Z
    v2 = st.v2
    J = np.empty((system.n_moments, Z.shape[1] + 1))
    Kp = system.Kp
    Q = system.Q
    with np.errstate(over="ignore", invalid="ignore"):
        v2eta = v2 * st.eta
        if Kp:
            J[:Kp, 0] = v2eta @ pu
            J[:Kp, 1:] = -(pu * v2[:, None]).T @ Z
        J[Kp:, 0] = Q.T @ v2eta
        J[Kp:, 1:] = -(Q * v2[:, None]).T @ Z
    return J


def moment_vector(system: MomentSystem, model: LogSheModel, data: Dataset, theta) -> np.ndarray:
    """``R(theta)``: quadratic moments ``u' P_s u`` followed by ``Q' u``."""
    _check_system(system, data)
    k = _kernel(model, data)
    k.state(theta, order=0, strict=True)
    return _moments_at(system, k, theta)[2]


def moment_jacobian(system: MomentSystem, model: LogSheModel, data: Dataset, theta) -> np.ndarray:
    """Derivative of :func:`moment_vector` with respect to theta (rho first).

    With ``eta = A_dot log Y^2`` and ``P* = P + P'`` the quadratic rows are
    ``((v^2 * eta)' P* u, -Z' diag(v^2) P* u)`` and the linear rows are
    ``(Q' (v^2 * eta), -Q' diag(v^2) Z)``.
    """
    _check_system(system, data)
    k = _kernel(model, data)
    k.state(theta, order=0, strict=True)
    st, pu, _ = _moments_at(system, k, theta)
    return _jacobian(system, k, st, pu)


def omega_sigma_R(system: MomentSystem, model, data: Dataset, theta, moments: MomentSet):
    """Covariance ``Omega_R`` and expected jacobian ``Sigma_R`` of the moments.

    Both are totals over units. With ``d_s = diag(P_s)``, ``B = A_dot A_inv``,
    ``delta = diag(B)`` and ``g = B (Z gamma + b_e 1)``::

        Omega_R[s, t] = (mu4 - 3 sigma^4) d_s'd_t + sigma^4 tr(P_s (P_t + P_t'))
        Omega_R[s, Q] = mu3 d_s' Q,   Omega_R[Q, Q] = sigma^2 Q'Q
        Sigma_R[s]    = (d_e sum(P*_s o B) + 2 d_s'(sigma^2 g + f_e delta), -2 sigma^2 d_s'Z)
        Sigma_R[Q]    = (Q'(sigma*^2 g + f_e* delta), -sigma*^2 Q'Z)
    """
    _check_system(system, data)
    k = _kernel(model, data)
    th = as_vector(theta)
    rho, gamma = th[0], th[1:]
    m = moments
    Z = k.Z
    Q = system.Q
    Kp, Kq = system.Kp, system.Kq
    D = system.diagonals
    s2, s4 = m.sigma2, m.sigma2**2
    M = Kp + Kq
    omega = np.zeros((M, M))
    for s in range(Kp):
        for t in range(s, Kp):
            Ps, Pt = system.P_list[s], system.P_list[t]
            tr_pp = _ewsum(Ps, Pt.T) + _ewsum(Ps, Pt)
            omega[s, t] = omega[t, s] = (m.mu4 - 3 * s4) * (D[:, s] @ D[:, t]) + s4 * tr_pp
    omega[:Kp, Kp:] = m.mu3 * (D.T @ Q)
    omega[Kp:, :Kp] = omega[:Kp, Kp:].T
    omega[Kp:, Kp:] = s2 * (Q.T @ Q)

    B = k.family.adot_ainv(rho)
    delta = np.diag(B).copy()
    g = B @ (Z @ gamma + m.b_e)
    sig = np.empty((M, Z.shape[1] + 1))
    for s in range(Kp):
        Ps = system.P_list[s]
        sig[s, 0] = m.d_e * (_ewsum(Ps, B) + _ewsum(Ps, B.T)) + 2.0 * D[:, s] @ (s2 * g + m.f_e * delta)
        sig[s, 1:] = -2.0 * s2 * (D[:, s] @ Z)
    sig[Kp:, 0] = Q.T @ (m.sigma_star2 * g + m.f_e_star * delta)
    sig[Kp:, 1:] = -m.sigma_star2 * (Q.T @ Z)
    return omega, sig


def regularize(omega: np.ndarray, cond_limit: float = 1e12):
    """Ridge ``omega`` when it is numerically singular.

    Returns ``(matrix, lambda)``; ``lambda`` is 0 when no ridge was needed,
    otherwise ``1e-8 tr(omega)/dim``.
    """
    omega = 0.5 * (omega + omega.T)
    w = np.linalg.eigvalsh(omega)
    if w.min() > 0 and w.max() / w.min() < cond_limit:
        return omega, 0.0
    lam = 1e-8 * float(np.trace(omega)) / omega.shape[0]
    return omega + lam * np.eye(omega.shape[0]), lam


@dataclass(kw_only=True)
class GMMFit(FitResult):
    """GMM / OGMM fit. ``objective`` is ``R' Xi R`` at the estimate."""

    objective: float = float("nan")
    Xi: np.ndarray | None = None
    omega_R_hat: np.ndarray | None = None
    sigma_R_hat: np.ndarray | None = None
    jacobian_hat: np.ndarray | None = None
    stage1: "GMMFit | None" = None
    instrument_hash: str = ""
    weight_hash: str = ""
    residual_v2: np.ndarray | None = None
    moment_values: np.ndarray | None = None
    gradient_norm: float = float("nan")
    ridge: float = 0.0

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(to_jsonable({
            "objective": self.objective,
            "gradient_norm": self.gradient_norm,
            "instrument_hash": self.instrument_hash,
            "weight_hash": self.weight_hash,
            "ridge_lambda": self.ridge,
            "moment_values": self.moment_values,
        }))
        if self.stage1 is not None:
            d["stage1"] = self.stage1.to_dict()
        return d


RHO_MARGIN = 1e-3


def compact_box(interval, margin: float = RHO_MARGIN) -> tuple[float, float]:
    """Closed sub-interval of rho over which the GMM objective is minimized."""
    lo, hi = interval
    m = margin * (hi - lo)
    return lo + m, hi - m


def _minimize_objective(system: MomentSystem, k: Kernel, Xi, starts, tol, max_iter):
    """Minimize ``R' Xi R`` over rho in :func:`compact_box` and free gamma.

    A minimizer on the edge of the box is accepted when the gamma gradient
    vanishes and the rho derivative points out of the box (KKT point). Returns
    ``(theta, objective, kkt_norm, converged, iterations, at_edge)``.
    """
    interval = k.family.interval
    box = compact_box(interval)
    R0 = []
    for s in starts:
        try:
            R0.append(_moments_at(system, k, s, order=0)[2])
        except LogSheError:
            pass
    scale = max(1.0, min((float(r @ Xi @ r) for r in R0), default=1.0))

    def fun_grad(th):
        st, pu, R = _moments_at(system, k, th)
        J = _jacobian(system, k, st, pu)
        XR = Xi @ R
        return float(R @ XR) / scale, 2.0 * (J.T @ XR) / scale

    def gauss_newton(th):
        st, pu, _ = _moments_at(system, k, th)
        J = _jacobian(system, k, st, pu)
        return 2.0 * (J.T @ Xi @ J) / scale

    starts = [np.r_[min(max(s[0], box[0]), box[1]), s[1:]] for s in starts]
    best, outcomes = minimize_theta(fun_grad, starts, box, max_iter=max_iter, gtol=1e-10, hess_fn=gauss_newton)
    iters = sum(o.iterations for o in outcomes)

    def value(th):
        R = _moments_at(system, k, th, order=0)[2]
        return float(R @ Xi @ R)

    def grad(th):
        st, pu, R = _moments_at(system, k, th)
        J = _jacobian(system, k, st, pu)
        return 2.0 * (J.T @ (Xi @ R)), J

    def hessian(th):
        g, J = grad(th)
        p = th.size
        H = np.empty((p, p))
        for i in range(p):
            h = 1e-6 * (1.0 + abs(th[i]))
            e = np.zeros(p)
            e[i] = h
            H[:, i] = (grad(th + e)[0] - grad(th - e)[0]) / (2 * h)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            H = 2.0 * J.T @ Xi @ J
        return g, H

    def ok(th):
        g, _ = grad(th)
        return np.max(np.abs(g)) < tol * max(1.0, value(th))

    def newton_step(th):
        g, H = hessian(th)
        return np.linalg.solve(H, -g)

    theta, extra = polish_newton(best.theta, value, newton_step, ok, box)
    iters += extra
    g, _ = grad(theta)
    obj = value(theta)
    gnorm = float(np.max(np.abs(g)))
    converged = bool(gnorm < tol * max(1.0, obj))
    at_edge = None
    width = box[1] - box[0]
    edge = box[1] if theta[0] > 0.5 * (box[0] + box[1]) else box[0]
    if not converged and abs(theta[0] - edge) < 1e-4 * width:
        # minimize over gamma with rho held on the edge, then check the KKT sign
        th = np.r_[edge, theta[1:]]

        def ok_edge(t):
            return np.max(np.abs(grad(t)[0][1:])) < tol * max(1.0, value(t))

        def edge_step(t):
            g_, H = hessian(t)
            return np.r_[0.0, np.linalg.solve(H[1:, 1:], -g_[1:])]

        th, more = polish_newton(th, value, edge_step, ok_edge, interval)
        iters += more
        g_e, _ = grad(th)
        obj_e = value(th)
        outward = g_e[0] <= 0 if edge == box[1] else g_e[0] >= 0
        kkt = float(np.max(np.abs(g_e[1:])))
        if obj_e <= obj and outward and kkt < tol * max(1.0, obj_e):
            theta, obj, gnorm, converged, at_edge = th, obj_e, kkt, True, float(edge)
    return theta, obj, gnorm, converged, iters, at_edge


def fit_gmm(system: MomentSystem, model: LogSheModel, data: Dataset, Xi=None, start=None,
            n_starts: int = 3, tol: float = 1e-6, max_iter: int = 500, covariance: bool = True,
            moment_mode="sample", method: str = "GMM") -> GMMFit:
    """Minimize ``R(theta)' Xi R(theta)``.

    The covariance is the sandwich
    ``(S' Xi S)^{-1} S' Xi Omega Xi S (S' Xi S)^{-1}`` with ``S = Sigma_R``
    and ``Omega = Omega_R`` estimated at the optimum.

    Raises
    ------
    FitFailedError
        If the gradient tolerance ``max|grad| < tol * max(1, D)`` is not met.
    """
    _check_system(system, data)
    k = _kernel(model, data)
    K1 = k.Z.shape[1] + 1
    if system.n_moments < K1:
        raise InvalidArgumentError(f"order condition fails: {system.n_moments} moments for {K1} parameters")
    Xi = system.Xi if Xi is None else np.asarray(Xi, dtype=float)
    if start is not None:
        starts = [as_vector(start)]
        k.family.check_rho(starts[0][0])
    else:
        starts = _default_starts(k, n_starts)
    theta, obj, gnorm, converged, iters, edge = _minimize_objective(system, k, Xi, starts, tol, max_iter)
    fit = _finish_fit(system, k, theta, Xi, obj, gnorm, converged, iters, method, covariance, moment_mode,
                      edge=edge)
    if not converged:
        raise FitFailedError(f"{method} did not converge: max|grad|={gnorm:.3g}", best=fit)
    return fit


def _finish_fit(system, k, theta, Xi, obj, gnorm, converged, iters, method, covariance, moment_mode,
                optimal=False, edge=None):
    st, _, R = _moments_at(system, k, theta, order=0)
    v2 = st.v2
    moments = estimate_moments(v2, moment_mode)
    warns = []
    if abs(to_free(theta, k.family.interval)[0]) > BOUNDARY_W:
        warns.append("boundary: rho estimate is close to the edge of the admissible interval")
    fit = GMMFit(method=method, theta=theta, covariance=None, converged=converged, iterations=iters,
                 moments=moments, objective=obj, Xi=Xi, instrument_hash=system.instrument_hash,
                 weight_hash=_hash_arrays(Xi), residual_v2=v2, moment_values=R, gradient_norm=gnorm,
                 warnings=warns, info={"family": k.family.kind.value, "n": k.n, "instruments": system.manifest(),
                                       "b_e_star_read_as": "b_e"})
    if edge is not None:
        fit.info["rho_on_box_edge"] = edge
        fit.warnings.append(f"rho minimizes the objective on the edge {edge:.6g} of the parameter box")
    if covariance:
        omega, sig = omega_sigma_R(system, k, k.data, theta, moments)
        fit.omega_R_hat, fit.sigma_R_hat = omega, sig
        st, pu, _ = _moments_at(system, k, theta)
        fit.jacobian_hat = _jacobian(system, k, st, pu)
        try:
            if optimal:
                om, lam = regularize(omega)
                fit.ridge = lam
                cov = np.linalg.inv(sig.T @ np.linalg.solve(om, sig))
            else:
                bread = np.linalg.inv(sig.T @ Xi @ sig)
                cov = bread @ (sig.T @ Xi @ omega @ Xi @ sig) @ bread
            fit.covariance = 0.5 * (cov + cov.T)
        except np.linalg.LinAlgError:
            fit.warnings.append("covariance unavailable: singular sandwich")
    return fit


def fit_ogmm(system: MomentSystem, model: LogSheModel, data: Dataset, start=None, n_starts: int = 3,
             tol: float = 1e-6, max_iter: int = 500, covariance: bool = True) -> GMMFit:
    """Two-step optimal GMM.

    Stage 1 is GMM with the identity weighting. ``Omega_R`` is then
    evaluated at the stage-1 estimate with sample moments of its residuals,
    ridged if numerically singular, and stage 2 minimizes
    ``R' Omega_R^{-1} R`` starting from the stage-1 estimate. The reported
    covariance is ``(Sigma_R' Omega_R^{-1} Sigma_R)^{-1}`` at the final
    estimate.
    """
    k = _kernel(model, data)
    ident = system.with_weighting(np.eye(system.n_moments))
    stage1 = fit_gmm(ident, k, data, start=start, n_starts=n_starts, tol=tol, max_iter=max_iter,
                     covariance=False)
    xi, lam = optimal_weighting(system, k, stage1.theta, stage1.residual_v2)
    theta, obj, gnorm, converged, iters, edge = _minimize_objective(system, k, xi, [stage1.theta], tol, max_iter)
    fit = _finish_fit(system, k, theta, xi, obj, gnorm, converged, iters, "OGMM", covariance, "sample",
                      optimal=True, edge=edge)
    fit.stage1 = stage1
    if lam:
        fit.warnings.append(f"Omega_R regularized with ridge lambda={lam:.3g}")
        fit.info["stage2_ridge_lambda"] = lam
    if not converged:
        raise FitFailedError(f"OGMM did not converge: max|grad|={gnorm:.3g}", best=fit)
    return fit


def optimal_weighting(system: MomentSystem, k: Kernel, theta, v2=None):
    """``Omega_R^{-1}`` at ``theta`` with sample moments; returns ``(Xi, ridge)``."""
    if v2 is None:
        v2 = k.state(theta, order=0).v2
    moments = estimate_moments(v2, "sample")
    omega, _ = omega_sigma_R(system, k, k.data, theta, moments)
    om, lam = regularize(omega)
    if lam:
        warnings.warn(f"Omega_R is near singular; ridge lambda={lam:.3g} applied", RuntimeWarning, stacklevel=2)
    xi = np.linalg.inv(om)
    return 0.5 * (xi + xi.T), lam

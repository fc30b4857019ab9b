"""Operator families A_n(rho) for SAR, SMA and SME spatial structures.

Each family maps rho to an n x n matrix ``A(rho)`` with ``A(0) = I``:

* SAR: ``A = I - rho W``
* SMA: ``A = (I - rho W)^{-1}``
* SME: ``A = sum_{i<=p} rho^i W^i / i!`` (the matrix exponential truncated at order p)

For SME the derivatives and the inverse are those of the truncated series
itself, so identities such as ``A @ A_inv = I`` and finite-difference checks
hold exactly within the truncated family.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import (
    DeterminantSignError,
    DomainError,
    InvalidArgumentError,
    NumericalError,
    SingularOperatorError,
)
from .weights import SME_BOX, WeightMatrix, rho_interval

__all__ = ["Kind", "OperatorFamily", "evaluate", "log_det_A", "trace_Adot_Ainv"]


class Kind(str, enum.Enum):
    SAR = "SAR"
    SMA = "SMA"
    SME = "SME"


WHICH = ("A", "F", "A_inv", "A_dot", "A_ddot")


def _solve(a, b):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            return sla.solve(a, b, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
        raise SingularOperatorError(f"operator is numerically singular: {exc}") from None


def _lu(a):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            lu = sla.lu_factor(a, check_finite=False)
    except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
        raise SingularOperatorError(f"operator is numerically singular: {exc}") from None
    if np.any(np.diag(lu[0]) == 0):
        raise SingularOperatorError("operator is exactly singular")
    return lu


@dataclass(frozen=True, eq=False)
class OperatorFamily:
    """The map rho -> A_n(rho) for one weight matrix.

    Parameters
    ----------
    kind : Kind or str
        ``"SAR"``, ``"SMA"`` or ``"SME"``.
    W : WeightMatrix
    sme_truncation : int
        Order p of the truncated exponential series (SME only), at least 4.
    sme_box : tuple
        Admissible rho box for SME.
    """

    kind: Kind
    W: WeightMatrix
    sme_truncation: int = 10
    sme_box: tuple = field(default=SME_BOX)

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(str(getattr(self.kind, "value", self.kind)).upper()))
        if not isinstance(self.W, WeightMatrix):
            raise InvalidArgumentError("W must be a WeightMatrix")
        if int(self.sme_truncation) < 4:
            raise InvalidArgumentError("sme_truncation must be at least 4")
        object.__setattr__(self, "sme_truncation", int(self.sme_truncation))
        if self.kind is not Kind.SME:
            # fill the eigenvalue cache up front so the object is immutable afterwards
            _ = self.eigenvalues

    @property
    def n(self) -> int:
        return self.W.n

    @cached_property
    def eigenvalues(self) -> np.ndarray | None:
        """Eigenvalues of W, or None when the eigensolver failed (LU fallback)."""
        try:
            return self.W.eigenvalues
        except NumericalError:
            return None

    @property
    def uses_lu_fallback(self) -> bool:
        return self.kind is not Kind.SME and self.eigenvalues is None

    @cached_property
    def interval(self) -> tuple[float, float]:
        return rho_interval(self.W, self.kind, self.sme_box)

    def check_rho(self, rho: float) -> float:
        lo, hi = self.interval
        rho = float(rho)
        if not (lo < rho < hi):
            raise DomainError(f"rho={rho} outside admissible interval ({lo}, {hi}) for {self.kind.value}")
        return rho

    # ------------------------------------------------------------------ dense
    def _sme_poly(self, rho: float, order: int) -> np.ndarray:
        """Dense sum_{i<=order} rho^i W^i / i! by Horner's rule."""
        n = self.n
        Ws = self.W.sparse
        out = np.eye(n)
        for i in range(order, 0, -1):
            out = Ws @ out * (rho / i)
            out[np.diag_indices(n)] += 1.0
        return out

    def evaluate(self, rho: float, which: str = "A") -> np.ndarray:
        """Dense ``A``, ``F = I - A``, ``A_inv``, ``A_dot`` or ``A_ddot`` at ``rho``."""
        if which not in WHICH:
            raise InvalidArgumentError(f"which must be one of {WHICH}, got {which!r}")
        rho = self.check_rho(rho)
        n = self.n
        W = self.W.matrix
        eye = np.eye(n)
        if which == "F":
            return eye - self.evaluate(rho, "A")
        if self.kind is Kind.SAR:
            if which == "A":
                return eye - rho * W
            if which == "A_dot":
                return -W.copy()
            if which == "A_ddot":
                return np.zeros((n, n))
            return _solve(eye - rho * W, eye)
        if self.kind is Kind.SMA:
            if which == "A_inv":
                return eye - rho * W
            A = _solve(eye - rho * W, eye)
            if which == "A":
                return A
            AWA = A @ W @ A
            if which == "A_dot":
                return AWA
            return 2.0 * AWA @ W @ A
        p = self.sme_truncation
        if which == "A":
            return self._sme_poly(rho, p)
        if which == "A_inv":
            return _solve(self._sme_poly(rho, p), eye)
        if which == "A_dot":
            return self.W.sparse @ self._sme_poly(rho, p - 1)
        Ws = self.W.sparse
        return Ws @ (Ws @ self._sme_poly(rho, p - 2))

    def adot_ainv(self, rho: float) -> np.ndarray:
        """Dense ``A_dot(rho) @ A_inv(rho)``."""
        rho = self.check_rho(rho)
        n = self.n
        eye = np.eye(n)
        Ws = self.W.sparse
        if self.kind is Kind.SAR:
            return -(Ws @ _solve(eye - rho * self.W.matrix, eye))
        if self.kind is Kind.SMA:
            return _solve(eye - rho * self.W.matrix, self.W.matrix)
        p = self.sme_truncation
        return Ws @ _solve(self._sme_poly(rho, p), self._sme_poly(rho, p - 1))

    def addot_ainv(self, rho: float) -> np.ndarray:
        """Dense ``A_ddot(rho) @ A_inv(rho)``."""
        rho = self.check_rho(rho)
        n = self.n
        if self.kind is Kind.SAR:
            return np.zeros((n, n))
        if self.kind is Kind.SMA:
            B = self.adot_ainv(rho)
            return 2.0 * B @ B
        p = self.sme_truncation
        Ws = self.W.sparse
        return Ws @ (Ws @ _solve(self._sme_poly(rho, p), self._sme_poly(rho, p - 2)))

    # ------------------------------------------------------------- log det
    def log_det(self, rho: float, deriv: int = 0) -> float:
        """``log det A(rho)`` (deriv=0) or its first/second rho-derivative.

        The first derivative equals ``tr(A_dot A_inv)``. Under a
        row-standardized W the SME value is exactly 0 for every order.
        """
        rho = self.check_rho(rho)
        if self.kind is Kind.SME:
            if not self.W.standardized:
                raise InvalidArgumentError("SME log det shortcut needs a standardized W")
            return 0.0
        sign = 1.0 if self.kind is Kind.SAR else -1.0
        if rho == 0.0 and deriv == 1:
            # exact: the trace of W is zero, eigenvalue sums only approximately so
            return -sign * float(np.trace(self.W.matrix))
        w = self.eigenvalues
        if w is None:
            return sign * self._log_det_lu(rho, deriv)
        d = 1.0 - rho * w
        if deriv == 0:
            if np.any(d.real <= 0):
                raise DeterminantSignError(f"det(I - rho W) not positive at rho={rho}")
            total = np.sum(np.log(d))
            if abs(total.imag) > 1e-10 * max(1.0, abs(total.real)):
                raise DeterminantSignError(f"log det has imaginary part {total.imag} at rho={rho}")
            return sign * float(total.real)
        if deriv == 1:
            return sign * float(np.sum(-w / d).real)
        if deriv == 2:
            return sign * float(np.sum(-(w**2) / d**2).real)
        raise InvalidArgumentError("deriv must be 0, 1 or 2")

    def _log_det_lu(self, rho, deriv):
        n = self.n
        L = np.eye(n) - rho * self.W.matrix
        if deriv == 0:
            s, ld = np.linalg.slogdet(L)
            if s <= 0:
                raise DeterminantSignError(f"det(I - rho W) not positive at rho={rho}")
            return float(ld)
        G = _solve(L, self.W.matrix)
        if deriv == 1:
            return -float(np.trace(G))
        return -float(np.sum(G * G.T))

    def solve(self, rho: float, rhs: np.ndarray) -> np.ndarray:
        """``A_inv(rho) @ rhs`` without forming the inverse."""
        rho = self.check_rho(rho)
        rhs = np.asarray(rhs, dtype=float)
        if self.kind is Kind.SMA:
            return rhs - rho * (self.W.sparse @ rhs)
        if self.kind is Kind.SAR:
            return _solve(np.eye(self.n) - rho * self.W.matrix, rhs)
        return _solve(self._sme_poly(rho, self.sme_truncation), rhs)

    # ------------------------------------------------------ vector images
    def image(self, x: np.ndarray) -> "_Image":
        """Precompute what is needed to evaluate A(rho) x and its derivatives fast."""
        return _Image(self, np.asarray(x, dtype=float))


class _Image:
    """Evaluates ``A(rho) x``, ``A_dot(rho) x`` and ``A_ddot(rho) x`` for a fixed x.

    SAR and SME keep a Krylov basis ``W^i x`` so each evaluation is a short
    linear combination; SMA solves with one LU factorization per rho.
    """

    def __init__(self, fam: OperatorFamily, x: np.ndarray):
        self.fam = fam
        self.x = x
        Ws = fam.W.sparse
        if fam.kind is Kind.SAR:
            self.basis = [x, Ws @ x]
        elif fam.kind is Kind.SME:
            basis = [x]
            for _ in range(fam.sme_truncation):
                basis.append(Ws @ basis[-1])
            self.basis = basis
        else:
            self.basis = None
        self._eye = None

    def at(self, rho: float, order: int = 1):
        """Return ``(A x, A_dot x, A_ddot x)`` truncated to ``order + 1`` items."""
        fam = self.fam
        b = self.basis
        if fam.kind is Kind.SAR:
            out = [b[0] - rho * b[1], -b[1], np.zeros_like(b[0])]
            return tuple(out[: order + 1])
        if fam.kind is Kind.SME:
            p = fam.sme_truncation
            out = []
            for d in range(order + 1):
                acc = np.zeros_like(b[0])
                for i in range(d, p + 1):
                    acc = acc + (rho ** (i - d) / math.factorial(i - d)) * b[i]
                out.append(acc)
            return tuple(out)
        W = fam.W.matrix
        if self._eye is None:
            self._eye = np.eye(fam.n)
        lu = _lu(self._eye - rho * W)
        a = sla.lu_solve(lu, self.x, check_finite=False)
        out = [a]
        if order >= 1:
            out.append(sla.lu_solve(lu, W @ a, check_finite=False))
        if order >= 2:
            out.append(2.0 * sla.lu_solve(lu, W @ out[1], check_finite=False))
        return tuple(out)


def evaluate(fam: OperatorFamily, rho: float, which: str = "A") -> np.ndarray:
    """Dense operator matrix; see :meth:`OperatorFamily.evaluate`."""
    return fam.evaluate(rho, which)


def log_det_A(fam: OperatorFamily, rho: float) -> float:
    """``log det A(rho)`` using the cached eigenvalues of W."""
    return fam.log_det(rho, 0)


def trace_Adot_Ainv(fam: OperatorFamily, rho: float) -> float:
    """``tr(A_dot(rho) A_inv(rho))``; exactly 0 for SME under a standardized W."""
    return fam.log_det(rho, 1)

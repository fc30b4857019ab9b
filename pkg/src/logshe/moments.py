"""Moments of the error distribution that enter the sandwich covariances.

All moments are functions of ``x = v^2``, ``u = x - 1`` and ``l = log x``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import digamma, polygamma

from .errors import InvalidArgumentError

__all__ = ["MomentSet", "MomentMode", "estimate_moments", "GAUSSIAN_MOMENTS"]


class MomentMode(str, enum.Enum):
    SAMPLE = "sample"
    GAUSSIAN = "gaussian"

    @classmethod
    def parse(cls, value) -> "MomentMode":
        s = str(getattr(value, "value", value)).lower()
        if s in ("sample",):
            return cls.SAMPLE
        if s in ("gaussian", "gaussiantheoretical", "gaussian_theoretical", "theoretical"):
            return cls.GAUSSIAN
        raise InvalidArgumentError(f"unknown moment mode {value!r}")


@dataclass(frozen=True)
class MomentSet:
    """Error moments.

    Attributes
    ----------
    a_e, b_e, c_e, d_e, e_e : float
        ``E u^2 l``, ``E l``, ``E u^2 l^2``, ``E u l`` and ``E l^2``.
    f_e : float
        ``a_e - sigma2 * b_e``.
    sigma2 : float
        ``E u^2``, the variance of ``v^2``.
    a_e_star, c_e_star : float
        ``E x l`` and ``E x l^2``.
    d_e_star : float
        ``d_e - 2``; zero for Gaussian errors, where the ML score is unbiased.
    f_e_star : float
        ``a_e_star - sigma_star2 * b_e``.
    sigma_star2 : float
        ``E x``.
    mu3, mu4 : float
        ``E u^3`` and ``E u^4``.
    """

    a_e: float
    b_e: float
    c_e: float
    d_e: float
    e_e: float
    f_e: float
    sigma2: float
    a_e_star: float
    c_e_star: float
    d_e_star: float
    f_e_star: float
    sigma_star2: float
    mu3: float
    mu4: float

    def as_dict(self) -> dict:
        return asdict(self)


def _gaussian() -> MomentSet:
    # x ~ chi2(1): E x^s log^k x follows from d^k/ds^k of 2^s Gamma(1/2+s)/Gamma(1/2)
    log2 = math.log(2.0)
    b = float(digamma(0.5)) + log2
    e = float(polygamma(1, 0.5)) + b * b
    a_star = float(digamma(1.5)) + log2
    c_star = a_star**2 + float(polygamma(1, 1.5))
    m52 = float(digamma(2.5)) + log2
    ex2l = 3.0 * m52
    ex2l2 = 3.0 * (m52**2 + float(polygamma(1, 2.5)))
    a = ex2l - 2.0 * a_star + b
    c = ex2l2 - 2.0 * c_star + e
    d = a_star - b
    sigma2 = 2.0
    return MomentSet(
        a_e=a, b_e=b, c_e=c, d_e=d, e_e=e, f_e=a - sigma2 * b, sigma2=sigma2,
        a_e_star=a_star, c_e_star=c_star, d_e_star=d - 2.0, f_e_star=a_star - b,
        sigma_star2=1.0, mu3=8.0, mu4=60.0,
    )


GAUSSIAN_MOMENTS = _gaussian()


def estimate_moments(v2, mode="sample") -> MomentSet:
    """Moment set from squared residuals, or the closed-form N(0,1) values.

    Parameters
    ----------
    v2 : array_like
        Positive squared residuals. Ignored (but still validated) in
        Gaussian mode.
    mode : {"sample", "gaussian"}
    """
    mode = MomentMode.parse(mode)
    x = np.asarray(v2, dtype=float).ravel()
    if x.size == 0:
        raise InvalidArgumentError("moment estimation needs at least one residual")
    if mode is MomentMode.GAUSSIAN:
        return GAUSSIAN_MOMENTS
    if not np.all(x > 0) or not np.all(np.isfinite(x)):
        raise InvalidArgumentError("squared residuals must be finite and positive")
    u = x - 1.0
    ll = np.log(x)
    u2 = u * u
    b = float(ll.mean())
    sigma2 = float(u2.mean())
    a = float((u2 * ll).mean())
    a_star = float((x * ll).mean())
    s_star = float(x.mean())
    d = float((u * ll).mean())
    return MomentSet(
        a_e=a,
        b_e=b,
        c_e=float((u2 * ll * ll).mean()),
        d_e=d,
        e_e=float((ll * ll).mean()),
        f_e=a - sigma2 * b,
        sigma2=sigma2,
        a_e_star=a_star,
        c_e_star=float((x * ll * ll).mean()),
        d_e_star=d - 2.0,
        f_e_star=a_star - s_star * b,
        sigma_star2=s_star,
        mu3=float((u2 * u).mean()),
        mu4=float((u2 * u2).mean()),
    )

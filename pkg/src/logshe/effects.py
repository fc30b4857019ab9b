"""Average total, direct and indirect effects of an exogenous variable.

For the mean model ``ybar = (I - rho W)^{-1} (beta_k x_k + beta_mk W x_k) + ...``
and for the squared response of the log-SHE model, where
``d y_i^2 / d x_jk = y_i^2 [A_inv(rho) (beta_k I + beta_mk W)]_ij``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from os import PathLike

import numpy as np

from .errors import InvalidArgumentError
from .model import Dataset, LogSheModel, as_vector
from .operators import _solve
from .weights import WeightMatrix

__all__ = ["EffectTriple", "mean_effects", "variance_effects", "effects_table", "write_effects_csv"]


@dataclass(frozen=True)
class EffectTriple:
    """ATE, ADE and AIE of one variable; ``aie`` is always ``ate - ade``."""

    ate: float
    ade: float
    aie: float

    @classmethod
    def from_matrix(cls, S: np.ndarray, weights: np.ndarray | None = None) -> "EffectTriple":
        """Effects of the derivative matrix ``diag(weights) S`` averaged over units."""
        n = S.shape[0]
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        ate = float(w @ S.sum(axis=1)) / n
        ade = float(w @ np.diag(S)) / n
        return cls(ate, ade, ate - ade)


def mean_effects(rho_bar: float, beta_k: float, beta_mk: float, W: WeightMatrix) -> EffectTriple:
    """Effects for the spatial Durbin mean model.

    ``ATE = 1'(I - rho W)^{-1}(beta_k I + beta_mk W) 1 / n`` and ``ADE`` the
    normalized trace of the same matrix.
    """
    if not abs(rho_bar) < 1:
        raise InvalidArgumentError("mean effects need |rho_bar| < 1")
    if not W.standardized:
        raise InvalidArgumentError("mean effects need a row-standardized W")
    n = W.n
    M = beta_k * np.eye(n) + beta_mk * W.matrix
    S = _solve(np.eye(n) - rho_bar * W.matrix, M)
    return EffectTriple.from_matrix(S)


def _durbin_split(model: LogSheModel, data: Dataset) -> int:
    if not model.durbin:
        raise InvalidArgumentError("variance effects need the Durbin layout (1, X, W X)")
    K = data.K
    if K % 2 == 0:
        raise InvalidArgumentError(f"Durbin layout needs an odd number of columns, got {K}")
    return (K - 1) // 2


def variance_effects(model: LogSheModel, data: Dataset, theta, k: int) -> EffectTriple:
    """Effects of the k-th exogenous variable (1-based) on ``y^2``.

    ``ATE = 1' diag(y^2) A_inv(rho) (beta_k I + beta_mk W) 1 / n`` and ``ADE``
    the normalized trace of the same matrix. ``theta`` may be a fit result.
    """
    th = as_vector(getattr(theta, "theta", theta))
    p = _durbin_split(model, data)
    if not 1 <= int(k) <= p:
        raise InvalidArgumentError(f"variable index {k} outside 1..{p}")
    beta, beta_m = th[1 + k], th[1 + p + k]
    n = data.n
    M = beta * np.eye(n) + beta_m * model.W.matrix
    S = model.family.solve(th[0], M)
    return EffectTriple.from_matrix(S, data.y**2)


def effects_table(model: LogSheModel, data: Dataset, theta, names=None) -> list[tuple[str, EffectTriple]]:
    """Variance effects for every exogenous variable."""
    p = _durbin_split(model, data)
    names = list(names) if names is not None else [f"x{k}" for k in range(1, p + 1)]
    if len(names) != p:
        raise InvalidArgumentError(f"expected {p} variable names")
    return [(names[k - 1], variance_effects(model, data, theta, k)) for k in range(1, p + 1)]


def write_effects_csv(path: str | PathLike, rows) -> None:
    """Write ``variable, ate, ade, aie`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "ate", "ade", "aie"])
        for name, e in rows:
            w.writerow([name, repr(e.ate), repr(e.ade), repr(e.aie)])

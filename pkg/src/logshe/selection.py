"""BIC comparison of operator families and backward elimination of regressors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import FitFailedError
from .ml import fit_ml
from .model import Dataset, LogSheModel

__all__ = ["bic", "BicRow", "SelectionReport", "select_model", "backward_elimination"]


def bic(loglik: float, n_params: int, n: int) -> float:
    """``-2 loglik + n_params log n``."""
    return -2.0 * loglik + n_params * math.log(n)


@dataclass
class BicRow:
    family: str
    with_x: bool
    loglik: float
    n_params: int
    bic: float
    converged: bool


@dataclass
class SelectionReport:
    rows: list = field(default_factory=list)
    best: BicRow | None = None
    kept: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    theta: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "candidates": [vars(r) for r in self.rows],
            "best": None if self.best is None else vars(self.best),
            "kept": self.kept,
            "dropped": self.dropped,
            "theta": self.theta,
            "warnings": self.warnings,
        }


def _fit(model, data, **kw):
    try:
        return fit_ml(model, data, **kw), True
    except FitFailedError as exc:
        if exc.best is None:
            raise
        return exc.best, False


def _names(data: Dataset, names=None) -> list[str]:
    K = data.K
    if names is not None and len(names) == K:
        return list(names)
    if K % 2 == 1 and K > 1:
        p = (K - 1) // 2
        return ["const"] + [f"x{k}" for k in range(1, p + 1)] + [f"Wx{k}" for k in range(1, p + 1)]
    return ["const"] + [f"z{k}" for k in range(1, K)]


def select_model(data: Dataset, families=("SAR", "SMA", "SME"), with_x=(True, False), threshold: float = 0.05,
                 names=None, **fit_kw) -> SelectionReport:
    """Fit every candidate by ML, rank by BIC and prune the winner.

    Candidates without X keep only the intercept column. The free
    parameters are rho and the retained gamma entries.
    """
    report = SelectionReport()
    n = data.n
    best_fit = None
    for fam in families:
        for wx in with_x:
            d = data if wx else Dataset(y=data.y, Z=data.Z[:, :1], W=data.W)
            model = LogSheModel.create(fam, data.W, durbin=wx and data.K % 2 == 1)
            fit, ok = _fit(model, d, covariance=False, **fit_kw)
            row = BicRow(fam, bool(wx), fit.loglik, 1 + d.K, bic(fit.loglik, 1 + d.K, n), ok)
            report.rows.append(row)
            if report.best is None or row.bic < report.best.bic:
                report.best, best_fit = row, (model, d)
    model, d = best_fit
    kept, dropped, theta, warns = backward_elimination(model, d, threshold, _names(d, names), **fit_kw)
    report.kept, report.dropped, report.theta, report.warnings = kept, dropped, theta, warns
    return report


def backward_elimination(model: LogSheModel, data: Dataset, threshold: float = 0.05, names=None, **fit_kw):
    """Drop the least significant gamma entry while its two-sided p-value exceeds ``threshold``.

    rho and the intercept (first column) are never dropped. Returns
    ``(kept names, dropped names, final theta, warnings)``.
    """
    names = list(names) if names is not None else _names(data)
    cols = list(range(data.K))
    dropped = []
    warns = []
    general = LogSheModel(model.family, durbin=False)
    while True:
        d = Dataset(y=data.y, Z=data.Z[:, cols], W=data.W)
        fit, _ = _fit(general, d, **fit_kw)
        if len(cols) == 1:
            if dropped:
                warns.append("every exogenous variable was eliminated; intercept retained")
            break
        se = fit.se
        if se is None or not np.all(np.isfinite(se)):
            warns.append("covariance unavailable; elimination stopped")
            break
        z = np.abs(fit.theta[2:]) / np.where(se[2:] > 0, se[2:], np.inf)
        p = 2.0 * norm.sf(z)
        j = int(np.argmax(p))
        if p[j] <= threshold:
            break
        dropped.append(names[cols[j + 1]])
        del cols[j + 1]
    return [names[c] for c in cols], dropped, fit.theta.tolist(), warns

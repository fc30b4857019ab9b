"""Result records shared by the estimators and tests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Theta
from .moments import MomentSet

__all__ = ["FitResult", "to_jsonable"]


def to_jsonable(obj):
    """Convert numpy containers (recursively) into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, MomentSet):
        return to_jsonable(obj.as_dict())
    return obj


@dataclass(kw_only=True)
class FitResult:
    """Point estimate, covariance and convergence record of one fit.

    ``covariance`` is the estimated covariance of ``theta`` (already divided
    by n); it is None for two-step ML.
    """

    method: str
    theta: np.ndarray
    covariance: np.ndarray | None
    converged: bool
    iterations: int
    moments: MomentSet | None = None
    loglik: float | None = None
    warnings: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def theta_hat(self) -> Theta:
        return Theta.from_vector(self.theta)

    @property
    def rho(self) -> float:
        return float(self.theta[0])

    @property
    def gamma(self) -> np.ndarray:
        return self.theta[1:]

    @property
    def se(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def to_dict(self) -> dict:
        return to_jsonable({
            "method": self.method,
            "theta": self.theta,
            "se": self.se,
            "covariance": self.covariance,
            "loglik": self.loglik,
            "convergence": {"converged": self.converged, "iterations": self.iterations},
            "moments": self.moments,
            "warnings": self.warnings,
            **self.info,
        })

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

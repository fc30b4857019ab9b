"""JSON run configuration. Unknown keys are rejected."""

from __future__ import annotations

import json
from os import PathLike
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .model import ErrorDistribution
from .weights import WeightMatrix, build_knn, build_rook, read_coordinates, row_standardize

__all__ = ["RunConfig", "WeightSpec", "DGPBlock", "EstimatorBlock", "MCBlock", "BICBlock", "OutputBlock",
           "load_config", "build_weights"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightSpec(_Strict):
    """How to obtain W: k-NN on coordinates, a rook grid or a dense matrix file.

    Without ``coords`` the k-NN points are uniform on the unit square, drawn
    from ``coord_seed`` (or the run seed) and the sample size.
    """

    kind: Literal["knn", "rook", "matrix"] = "knn"
    k: int = 5
    coords: str | None = None
    coord_seed: int | None = None
    rows: int | None = None
    cols: int | None = None
    matrix: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "rook" and (self.rows is None or self.cols is None):
            raise ValueError("rook weights need rows and cols")
        if self.kind == "matrix" and self.matrix is None:
            raise ValueError("matrix weights need a 'matrix' CSV path")
        if self.k < 1:
            raise ValueError("k must be positive")
        return self


class DGPBlock(_Strict):
    family: Literal["SAR", "SMA", "SME"] = "SAR"
    theta0: list[float] = Field(default_factory=lambda: [0.3, 1.0, 3.0, 3.0])
    errors: str = "N(0,1)"
    n: int = 200
    n_x: int = 1
    durbin: bool = True
    W: WeightSpec = Field(default_factory=WeightSpec)
    alternative: Literal["HigherOrder", "Generalized"] | None = None
    rho_star: float = 0.6
    W_star: WeightSpec = Field(default_factory=lambda: WeightSpec(kind="knn", k=2))

    @field_validator("family", mode="before")
    @classmethod
    def _upper(cls, v):
        return str(v).upper()

    @field_validator("errors")
    @classmethod
    def _errors(cls, v):
        ErrorDistribution.parse(v)
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if len(self.theta0) < 2:
            raise ValueError("theta0 needs rho and gamma")
        if self.durbin and len(self.theta0) - 1 != 1 + 2 * self.n_x:
            raise ValueError(f"Durbin layout with n_x={self.n_x} needs {2 + 2 * self.n_x} theta0 entries")
        return self


class EstimatorBlock(_Strict):
    methods: list[Literal["ml", "2sml", "gmm", "ogmm"]] = Field(default_factory=lambda: ["ml"])
    kappa_max: int = 4
    n_starts: int = 3
    tol: float = 1e-6
    max_iter: int = 500
    moment_mode: Literal["sample", "gaussian"] = "sample"
    constraint: str | None = None

    @field_validator("methods", mode="before")
    @classmethod
    def _lower(cls, v):
        return [str(m).lower() for m in v]

    @field_validator("kappa_max")
    @classmethod
    def _kappa(cls, v):
        if not 1 <= v <= 6:
            raise ValueError("kappa_max must be between 1 and 6")
        return v


class MCBlock(_Strict):
    mode: Literal["estimation", "test", "jtest"] = "estimation"
    replications: int = 100
    master_seed: int | None = None
    rho0: list[float] | None = None
    n: list[int] | None = None
    errors: list[str] | None = None
    families: list[Literal["SAR", "SMA", "SME"]] | None = None
    taus: list[float] = Field(default_factory=lambda: [0.01, 0.05, 0.10])
    dgps: list[Literal["null", "HigherOrder", "Generalized"]] = Field(
        default_factory=lambda: ["null", "HigherOrder", "Generalized"])
    max_failure_rate: float = 0.05

    @model_validator(mode="after")
    def _check(self):
        if self.replications < 2:
            raise ValueError("replications must be at least 2")
        if any(not 0 < t < 1 for t in self.taus):
            raise ValueError("taus must lie in (0, 1)")
        return self


class BICBlock(_Strict):
    families: list[Literal["SAR", "SMA", "SME"]] = Field(default_factory=lambda: ["SAR", "SMA", "SME"])
    with_x: list[bool] = Field(default_factory=lambda: [True, False])
    threshold: float = 0.05


class OutputBlock(_Strict):
    dir: str = "."
    prefix: str = ""


class RunConfig(_Strict):
    """Top-level configuration document."""

    seed: int | None = None
    dgp: DGPBlock = Field(default_factory=DGPBlock)
    estimator: EstimatorBlock = Field(default_factory=EstimatorBlock)
    mc: MCBlock = Field(default_factory=MCBlock)
    bic: BICBlock = Field(default_factory=BICBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)
    variables: list[str] | None = None

    def dump(self) -> dict:
        return self.model_dump(mode="json")


def _resolve(base: Path, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def load_config(path: str | PathLike | None = None, text: str | None = None) -> RunConfig:
    """Parse and validate a configuration; relative file paths are resolved
    against the directory of the configuration file and must exist."""
    try:
        if text is None:
            if path is None:
                return RunConfig()
            text = Path(path).read_text()
        doc = json.loads(text)
        cfg = RunConfig.model_validate(doc)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    base = Path(path).parent if path is not None else Path(".")
    for spec in (cfg.dgp.W, cfg.dgp.W_star):
        spec.coords = _resolve(base, spec.coords)
        spec.matrix = _resolve(base, spec.matrix)
        for f in (spec.coords, spec.matrix):
            if f is not None and not Path(f).exists():
                raise ConfigError(f"referenced file {f} does not exist")
    return cfg


def build_weights(spec: WeightSpec, n: int, seed: int | None = None) -> WeightMatrix:
    """Weight matrix for ``n`` units from a :class:`WeightSpec`."""
    if spec.kind == "rook":
        W = build_rook(spec.rows, spec.cols)
    elif spec.kind == "matrix":
        W = row_standardize(np.loadtxt(spec.matrix, delimiter=","))
    else:
        if spec.coords is not None:
            pts = read_coordinates(spec.coords).points
        else:
            s = spec.coord_seed if spec.coord_seed is not None else seed
            if s is None:
                raise ConfigError("k-NN weights without coordinates need a seed")
            pts = coordinate_draw(int(s), n)
        W = build_knn(pts, spec.k)
    if W.n != n:
        raise ConfigError(f"weight matrix has {W.n} units but n={n}")
    return W


def coordinate_draw(seed: int, n: int) -> np.ndarray:
    """Uniform points on the unit square; the first m points do not depend on n."""
    rng = np.random.default_rng([seed, 0x57])
    return rng.random((n, 2))

"""The log-SHE model: variance components, residuals and simulation.

The model is ``Y = diag(H)^{1/2} V`` with
``log H = Z gamma + F(rho) log Y^2`` and ``F = I - A``, equivalently
``A(rho) log Y^2 = Z gamma + log V^2``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from .errors import (
    DGPInstabilityError,
    InvalidArgumentError,
    NonFiniteVarianceError,
    SingularOperatorError,
)
from .operators import Kind, OperatorFamily, _solve
from .weights import WeightMatrix

__all__ = [
    "Theta",
    "Dataset",
    "ErrorDistribution",
    "LogSheModel",
    "durbin_design",
    "h_vector",
    "v2_vector",
    "simulate",
    "simulate_alternative",
    "draw_errors",
    "as_vector",
]

_EXP_CAP = 700.0


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, a sequence of ints or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """Deterministic children of ``seed`` that do not depend on earlier spawns."""
    ss = seed_sequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + (i,)) for i in range(count)]


@dataclass(frozen=True)
class Theta:
    """Parameter vector theta = (rho, gamma')'."""

    rho: float
    gamma: tuple

    @property
    def vector(self) -> np.ndarray:
        return np.r_[float(self.rho), np.asarray(self.gamma, dtype=float)]

    @classmethod
    def from_vector(cls, theta) -> "Theta":
        theta = np.asarray(theta, dtype=float)
        return cls(float(theta[0]), tuple(float(g) for g in theta[1:]))


def as_vector(theta) -> np.ndarray:
    """Return theta as a float vector (rho first), accepting :class:`Theta` too."""
    if isinstance(theta, Theta):
        return theta.vector
    out = np.asarray(theta, dtype=float).ravel()
    if out.size < 2:
        raise InvalidArgumentError("theta needs rho and at least one gamma entry")
    return out


def durbin_design(X, W: WeightMatrix) -> np.ndarray:
    """Spatial Durbin design ``(1, X, W X)``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X, W.sparse @ X])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses, design and weights for one cross-section.

    ``X`` is kept when the design follows the Durbin layout; ``errors`` holds
    the generating ``v_i`` for simulated data.
    """

    y: np.ndarray
    Z: np.ndarray
    W: WeightMatrix
    W_star: WeightMatrix | None = None
    X: np.ndarray | None = None
    errors: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        Z = np.array(self.Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        n = y.size
        if Z.shape[0] != n or self.W.n != n:
            raise InvalidArgumentError(f"dimension mismatch: y has {n}, Z has {Z.shape[0]}, W has {self.W.n} rows")
        if self.W_star is not None and self.W_star.n != n:
            raise InvalidArgumentError("W_star has the wrong dimension")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(Z)):
            raise InvalidArgumentError("y and Z must be finite")
        zeros = np.flatnonzero(y == 0.0)
        if zeros.size:
            raise InvalidArgumentError(f"y is exactly zero at rows {zeros[:10].tolist()}; log y^2 undefined")
        if np.linalg.matrix_rank(Z) < Z.shape[1]:
            raise InvalidArgumentError("Z does not have full column rank")
        y.setflags(write=False)
        Z.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "Z", Z)
        if self.X is not None:
            X = np.array(self.X, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def K(self) -> int:
        return self.Z.shape[1]

    @classmethod
    def durbin(cls, y, X, W: WeightMatrix, **kw) -> "Dataset":
        return cls(y=y, Z=durbin_design(X, W), W=W, X=X, **kw)

    # ------------------------------------------------------------------ IO
    def to_csv(self, path: str | PathLike) -> None:
        """Write ``y, z1..zK`` with full float precision."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y"] + [f"z{k + 1}" for k in range(self.K)])
            for yi, zi in zip(self.y, self.Z):
                w.writerow([repr(float(yi))] + [repr(float(v)) for v in zi])

    @classmethod
    def from_csv(cls, path: str | PathLike, W: WeightMatrix, durbin_x: int | None = None) -> "Dataset":
        """Read a ``y, z1..zK`` CSV; rows with ``y = 0`` are reported by line."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0].strip().lower() != "y":
            raise InvalidArgumentError(f"{path}: header must start with 'y'")
        data = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
            if vals[0] == 0.0:
                raise InvalidArgumentError(f"{path}:{lineno}: y is zero (row {lineno - 1})")
            data.append(vals)
        arr = np.array(data)
        Z = arr[:, 1:]
        X = None
        if durbin_x:
            X = Z[:, 1 : 1 + durbin_x]
        return cls(y=arr[:, 0], Z=Z, W=W, X=X)

    def to_json(self) -> str:
        doc = {
            "y": self.y.tolist(),
            "Z": self.Z.tolist(),
            "W": self.W.matrix.tolist(),
            "W_standardized": self.W.standardized,
            "W_star": None if self.W_star is None else self.W_star.matrix.tolist(),
            "X": None if self.X is None else self.X.tolist(),
            "errors": None if self.errors is None else self.errors.tolist(),
            "meta": self.meta,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        W = WeightMatrix(np.array(doc["W"]), standardized=doc.get("W_standardized", True))
        Ws = None if doc.get("W_star") is None else WeightMatrix(np.array(doc["W_star"]))
        return cls(
            y=np.array(doc["y"]),
            Z=np.array(doc["Z"]),
            W=W,
            W_star=Ws,
            X=None if doc.get("X") is None else np.array(doc["X"]),
            errors=None if doc.get("errors") is None else np.array(doc["errors"]),
            meta=doc.get("meta", {}),
        )

    def permuted(self, perm) -> "Dataset":
        perm = np.asarray(perm)
        return Dataset(
            y=self.y[perm],
            Z=self.Z[perm],
            W=self.W.permuted(perm),
            W_star=None if self.W_star is None else self.W_star.permuted(perm),
            X=None if self.X is None else self.X[perm],
            errors=None if self.errors is None else self.errors[perm],
        )


class ErrorKind(str, enum.Enum):
    STD_NORMAL = "StdNormal"
    MIXED_NORMAL = "MixedNormal"
    UNIFORM = "Uniform"


@dataclass(frozen=True)
class ErrorDistribution:
    """Distribution of v_i, scaled so that E v^2 = 1.

    ``MixedNormal(a, b)`` mixes N(a/c, b/c^2) and N(-a/c, b/c^2) with equal
    weights, ``c = sqrt(a^2 + b)``. ``Uniform`` is U(-sqrt 3, sqrt 3).
    """

    kind: ErrorKind = ErrorKind.STD_NORMAL
    a: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ErrorKind(self.kind))
        if self.kind is ErrorKind.MIXED_NORMAL and not self.b > 0:
            raise InvalidArgumentError("MixedNormal needs b > 0")

    @classmethod
    def parse(cls, spec: str) -> "ErrorDistribution":
        """Parse ``"N(0,1)"``, ``"MN(2,1)"`` or ``"U"`` style labels."""
        s = spec.replace(" ", "").upper()
        if s in ("N", "N(0,1)", "NORMAL", "STDNORMAL"):
            return cls(ErrorKind.STD_NORMAL)
        if s.startswith("MN") or s.startswith("MIXEDNORMAL"):
            args = s[s.index("(") + 1 : s.rindex(")")].split(",") if "(" in s else ["2", "1"]
            return cls(ErrorKind.MIXED_NORMAL, float(args[0]), float(args[1]))
        if s.startswith("U"):
            return cls(ErrorKind.UNIFORM)
        raise InvalidArgumentError(f"unknown error distribution {spec!r}")

    @property
    def label(self) -> str:
        if self.kind is ErrorKind.STD_NORMAL:
            return "N(0,1)"
        if self.kind is ErrorKind.MIXED_NORMAL:
            return f"MN({self.a:g},{self.b:g})"
        return "U(-sqrt3,sqrt3)"

    def sample(self, n: int, seed) -> np.ndarray:
        """Draw n errors. Unit i always uses the i-th draw of each stream."""
        main, aux = (np.random.default_rng(s) for s in child_seeds(seed, 2))
        if self.kind is ErrorKind.STD_NORMAL:
            return main.standard_normal(n)
        if self.kind is ErrorKind.UNIFORM:
            r3 = math.sqrt(3.0)
            return main.uniform(-r3, r3, n)
        c = math.sqrt(self.a**2 + self.b)
        sign = np.where(aux.random(n) < 0.5, 1.0, -1.0)
        return sign * self.a / c + math.sqrt(self.b) / c * main.standard_normal(n)


def draw_errors(dist: ErrorDistribution, n: int, seed) -> tuple[np.ndarray, int]:
    """Errors with the |v| < 1e-300 guard; returns the draws and the resample count."""
    base, guard = child_seeds(seed, 2)
    v = dist.sample(n, base)
    bad = np.flatnonzero(np.abs(v) < 1e-300)
    count = 0
    rounds = 0
    while bad.size:
        count += bad.size
        v[bad] = dist.sample(bad.size, child_seeds(guard, rounds + 1)[rounds])
        rounds += 1
        bad = np.flatnonzero(np.abs(v) < 1e-300)
    return v, count


@dataclass(frozen=True, eq=False)
class LogSheModel:
    """A log-SHE specification: operator family plus design layout."""

    family: OperatorFamily
    durbin: bool = True

    @classmethod
    def create(cls, kind, W: WeightMatrix, durbin: bool = True, **family_kw) -> "LogSheModel":
        return cls(OperatorFamily(kind, W, **family_kw), durbin)

    @property
    def kind(self) -> Kind:
        return self.family.kind

    @property
    def W(self) -> WeightMatrix:
        return self.family.W

    def check(self, data: Dataset, theta=None) -> None:
        if data.n != self.family.n:
            raise InvalidArgumentError("dataset and weight matrix sizes differ")
        if self.durbin and data.K % 2 == 0:
            raise InvalidArgumentError(f"Durbin layout needs K = 1 + 2p columns, got K={data.K}")
        if theta is not None:
            th = as_vector(theta)
            if th.size != data.K + 1:
                raise InvalidArgumentError(f"theta has {th.size} entries, expected {data.K + 1}")
            self.family.check_rho(th[0])


class Kernel:
    """Per-(model, dataset) cache of the quantities shared by all estimators.

    ``state(theta)`` returns ``a = A log Y^2``, ``eta = A_dot log Y^2``,
    ``eta2 = A_ddot log Y^2`` and ``v2 = exp(a - Z gamma)``.
    """

    def __init__(self, model: LogSheModel, data: Dataset):
        model.check(data)
        self.model = model
        self.data = data
        self.family = model.family
        self.Z = data.Z
        self.n = data.n
        self.logy2 = np.log(data.y**2)
        self.image = model.family.image(self.logy2)

    def state(self, theta, order: int = 1, strict: bool = False):
        th = as_vector(theta)
        rho = self.family.check_rho(th[0])
        imgs = self.image.at(rho, order)
        expo = imgs[0] - self.Z @ th[1:]
        if strict:
            bad = np.flatnonzero(-expo + self.logy2 > _EXP_CAP)
            if bad.size:
                raise NonFiniteVarianceError(f"h overflows at unit {int(bad[0])}")
        v2 = np.exp(np.minimum(expo, _EXP_CAP))
        return State(th, imgs[0], imgs[1] if order >= 1 else None, imgs[2] if order >= 2 else None, v2, expo)


@dataclass
class State:
    theta: np.ndarray
    a: np.ndarray
    eta: np.ndarray | None
    eta2: np.ndarray | None
    v2: np.ndarray
    expo: np.ndarray

    @property
    def u(self) -> np.ndarray:
        return self.v2 - 1.0


def h_vector(model: LogSheModel, data: Dataset, theta) -> np.ndarray:
    """``h_i = exp(Z_i' gamma + [F(rho) log Y^2]_i)``."""
    k = Kernel(model, data)
    st = k.state(theta, order=0, strict=True)
    log_h = k.logy2 - st.a + data.Z @ st.theta[1:]
    h = np.exp(log_h)
    bad = np.flatnonzero(~np.isfinite(h) | (h <= 0))
    if bad.size:
        raise NonFiniteVarianceError(f"h is not finite and positive at unit {int(bad[0])}")
    return h


def v2_vector(model: LogSheModel, data: Dataset, theta) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(v^2, V*)`` with ``v_i^2 = y_i^2 / h_i`` and ``V* = v^2 - 1``."""
    h = h_vector(model, data, theta)
    v2 = data.y**2 / h
    return v2, v2 - 1.0


def _design_for(model: LogSheModel, n: int, X, Z, n_x: int, x_seed):
    if Z is not None:
        Z = np.asarray(Z, dtype=float)
        return (Z[:, None] if Z.ndim == 1 else Z), None
    if X is None:
        X = np.random.default_rng(x_seed).standard_normal((n_x, n)).T
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if model.durbin:
        return durbin_design(X, model.W), X
    return np.column_stack([np.ones(n), X]), X


def _assemble(model, theta0, errors, seed, X, Z, n_x):
    th = as_vector(theta0)
    n = model.family.n
    x_seed, e_seed = child_seeds(seed, 2)
    Zm, Xm = _design_for(model, n, X, Z, n_x, x_seed)
    if Zm.shape[1] != th.size - 1:
        raise InvalidArgumentError(f"theta0 has {th.size - 1} gamma entries but Z has {Zm.shape[1]} columns")
    v, resampled = draw_errors(errors, n, e_seed)
    return th, Zm, Xm, v, resampled


def _finish(model, logy2, v, Zm, Xm, resampled, W_star=None, **meta):
    if not np.all(np.isfinite(logy2)):
        raise DGPInstabilityError("simulated log Y^2 is not finite")
    y = np.sign(v) * np.exp(0.5 * logy2)
    if np.any(y == 0.0) or not np.all(np.isfinite(y)):
        raise DGPInstabilityError("simulated y underflowed or overflowed")
    meta = dict(meta, resampled=resampled)
    return Dataset(y=y, Z=Zm, W=model.W, W_star=W_star, X=Xm, errors=v, meta=meta)


def simulate(model: LogSheModel, theta0, errors: ErrorDistribution | None = None, seed=0,
             X=None, Z=None, n_x: int = 1) -> Dataset:
    """Draw one dataset from the log-SHE model at ``theta0``.

    ``log Y^2 = A_inv(rho0) (Z gamma0 + log V^2)`` and ``y_i`` carries the sign
    of ``v_i``. Without ``X``/``Z`` the exogenous columns are i.i.d. N(0,1)
    (``n_x`` of them) and the Durbin layout builds ``Z = (1, X, W X)``.
    """
    errors = errors or ErrorDistribution()
    th = as_vector(theta0)
    model.family.check_rho(th[0])
    th, Zm, Xm, v, resampled = _assemble(model, th, errors, seed, X, Z, n_x)
    rhs = Zm @ th[1:] + np.log(v**2)
    try:
        logy2 = model.family.solve(th[0], rhs)
    except SingularOperatorError as exc:
        raise DGPInstabilityError(str(exc)) from None
    return _finish(model, logy2, v, Zm, Xm, resampled, dgp="null", rho0=float(th[0]))


class AlternativeKind(str, enum.Enum):
    HIGHER_ORDER = "HigherOrder"
    GENERALIZED = "Generalized"


def simulate_alternative(kind, model: LogSheModel, theta0, W_star: WeightMatrix,
                         errors: ErrorDistribution | None = None, seed=0, rho_star: float = 0.6,
                         X=None, Z=None, n_x: int = 1) -> Dataset:
    """Draw from a misspecified SAR-type alternative.

    HigherOrder: ``(I - rho0 W - rho* W*) log Y^2 = Z gamma0 + log V^2``.
    Generalized: ``log H = rho0 W log Y^2 + Z gamma0 + rho* W* log H``, solved
    jointly as ``(I - rho0 W - rho* W*) log Y^2 = Z gamma0 + (I - rho* W*) log V^2``.
    The draws match :func:`simulate` for the same seed.
    """
    kind = AlternativeKind(kind)
    if model.kind is not Kind.SAR:
        raise InvalidArgumentError("alternative DGPs are defined for the SAR-type null")
    errors = errors or ErrorDistribution()
    th, Zm, Xm, v, resampled = _assemble(model, theta0, errors, seed, X, Z, n_x)
    n = model.family.n
    ell = np.log(v**2)
    Wm, Wsm = model.W.matrix, W_star.matrix
    L = np.eye(n) - th[0] * Wm - rho_star * Wsm
    if kind is AlternativeKind.HIGHER_ORDER:
        rhs = Zm @ th[1:] + ell
    else:
        rhs = Zm @ th[1:] + ell - rho_star * (W_star.sparse @ ell)
    try:
        logy2 = _solve(L, rhs)
    except SingularOperatorError as exc:
        raise DGPInstabilityError(f"alternative DGP is unstable: {exc}") from None
    return _finish(model, logy2, v, Zm, Xm, resampled, W_star=W_star, dgp=kind.value,
                   rho0=float(th[0]), rho_star=float(rho_star))

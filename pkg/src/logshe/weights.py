"""Spatial weight matrices: construction, row-standardization and checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError, IsolatedUnitError, NumericalError

__all__ = [
    "WeightMatrix",
    "Coordinates",
    "AssumptionReport",
    "build_knn",
    "build_rook",
    "row_standardize",
    "rho_interval",
    "validate_assumptions",
    "read_coordinates",
    "SME_BOX",
]

SME_BOX = (-2.0, 2.0)
_ROW_SUM_TOL = 1e-12
_IMAG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Dense spatial weight matrix M_n with zero diagonal.

    Parameters
    ----------
    matrix : ndarray of shape (n, n)
        Nonnegative weights m_ij. A read-only copy is stored.
    standardized : bool
        Whether every row sums to one.
    """

    matrix: np.ndarray
    standardized: bool = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError(f"weight matrix must be square, got shape {m.shape}")
        if m.shape[0] < 2:
            raise InvalidArgumentError("weight matrix needs at least two units")
        if not np.all(np.isfinite(m)):
            raise InvalidArgumentError("weight matrix has non-finite entries")
        if np.any(np.diag(m) != 0.0):
            raise InvalidArgumentError("weight matrix must have an exactly zero diagonal")
        if np.any(m < 0.0):
            raise InvalidArgumentError("weight matrix has negative entries")
        if self.standardized:
            rs = m.sum(axis=1)
            if np.max(np.abs(rs - 1.0)) >= _ROW_SUM_TOL:
                raise InvalidArgumentError("matrix flagged standardized but rows do not sum to 1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def sparse(self) -> sparse.csr_matrix:
        """CSR copy used for fast products."""
        return sparse.csr_matrix(self.matrix)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Complex eigenvalues of the matrix, computed once."""
        try:
            w = np.linalg.eigvals(self.matrix)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
            raise NumericalError(f"eigensolver failed for n={self.n}: {exc}") from exc
        if not np.all(np.isfinite(w)):
            raise NumericalError("eigensolver returned non-finite eigenvalues")
        return w

    def permuted(self, perm) -> "WeightMatrix":
        """Relabel units so that new unit i is old unit perm[i]."""
        perm = np.asarray(perm)
        return WeightMatrix(self.matrix[np.ix_(perm, perm)], standardized=self.standardized)


@dataclass(frozen=True)
class Coordinates:
    """Locations of the spatial units in R^r (Euclidean metric)."""

    points: np.ndarray
    ids: tuple = field(default=())

    def __post_init__(self):
        p = np.array(self.points, dtype=float)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[0] < 2:
            raise InvalidArgumentError("need at least two points given as an (n, r) array")
        if not np.all(np.isfinite(p)):
            raise InvalidArgumentError("coordinates must be finite")
        object.__setattr__(self, "points", p)
        if not self.ids:
            object.__setattr__(self, "ids", tuple(range(p.shape[0])))

    @property
    def n(self) -> int:
        return self.points.shape[0]


def read_coordinates(path: str | PathLike) -> Coordinates:
    """Read a coordinate CSV with header ``id, x, y[, z...]`` (units in file order)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgumentError(f"{path}: empty coordinate file")
    header = [h.strip().lower() for h in rows[0]]
    if len(header) < 2 or header[0] != "id":
        raise InvalidArgumentError(f"{path}: header must start with 'id' followed by coordinates")
    ids, pts = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise InvalidArgumentError(f"{path}:{lineno}: expected {len(header)} fields")
        ids.append(row[0].strip())
        try:
            pts.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: {exc}") from None
    return Coordinates(np.array(pts), tuple(ids))


def row_standardize(matrix) -> WeightMatrix:
    """Divide each row of a nonnegative zero-diagonal matrix by its sum.

    Raises
    ------
    IsolatedUnitError
        If some row is entirely zero.
    """
    m = np.array(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"weight matrix must be square, got shape {m.shape}")
    if np.any(m < 0):
        raise InvalidArgumentError("weight matrix has negative entries")
    if np.any(np.diag(m) != 0):
        raise InvalidArgumentError("weight matrix must have a zero diagonal")
    rs = m.sum(axis=1)
    isolated = np.flatnonzero(rs == 0)
    if isolated.size:
        raise IsolatedUnitError(f"units {isolated.tolist()} have no neighbours")
    return WeightMatrix(m / rs[:, None], standardized=True)


def build_knn(coords: Coordinates | np.ndarray, k: int) -> WeightMatrix:
    """Row-standardized k-nearest-neighbour matrix.

    Each unit gets its ``k`` nearest other units by Euclidean distance, ties
    broken by the lower unit index, and each neighbour weight is ``1/k``.
    """
    if not isinstance(coords, Coordinates):
        coords = Coordinates(coords)
    n = coords.n
    if not (1 <= int(k) <= n - 1) or int(k) != k:
        raise InvalidArgumentError(f"k must be an integer in [1, {n - 1}], got {k}")
    k = int(k)
    d = cdist(coords.points, coords.points)
    np.fill_diagonal(d, np.inf)
    # stable sort keeps the lower index first among equal distances
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    m = np.zeros((n, n))
    m[np.repeat(np.arange(n), k), nbrs.ravel()] = 1.0
    return row_standardize(m)


def build_rook(rows: int, cols: int) -> WeightMatrix:
    """Row-standardized rook (4-neighbourhood) matrix on a rows x cols grid.

    Units are numbered row-major.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise InvalidArgumentError(f"grid {rows}x{cols} has fewer than two cells")
    n = rows * cols
    m = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if r > 0:
                m[i, i - cols] = 1.0
            if r < rows - 1:
                m[i, i + cols] = 1.0
            if c > 0:
                m[i, i - 1] = 1.0
            if c < cols - 1:
                m[i, i + 1] = 1.0
    return row_standardize(m)


def rho_interval(W: WeightMatrix, family="SAR", sme_box=SME_BOX) -> tuple[float, float]:
    """Open interval of admissible rho for an operator family.

    For SAR and SMA the interval is ``(-min(1/|omega_min|, 1), 1)`` with
    ``omega_min`` the smallest real eigenvalue of ``W``. SME uses the
    finite box ``sme_box``.
    """
    kind = str(getattr(family, "value", family)).upper()
    if kind == "SME":
        return float(sme_box[0]), float(sme_box[1])
    if kind not in ("SAR", "SMA"):
        raise InvalidArgumentError(f"unknown operator family {family!r}")
    if not W.standardized:
        raise InvalidArgumentError("rho_interval needs a row-standardized matrix")
    w = W.eigenvalues
    real = w.real[np.abs(w.imag) <= _IMAG_TOL * max(1.0, float(np.max(np.abs(w))))]
    wmin = float(real.min()) if real.size else 0.0
    lo = -1.0 if wmin >= 0 else -min(1.0 / abs(wmin), 1.0)
    return lo, 1.0


@dataclass(frozen=True)
class AssumptionReport:
    """Pass/fail results of the finite-sample checks on a weight matrix."""

    zero_diagonal: bool
    nonnegative: bool
    row_sums_one: bool
    spectral_radius_le_one: bool
    spectral_radius: float

    @property
    def ok(self) -> bool:
        return self.zero_diagonal and self.nonnegative and self.row_sums_one and self.spectral_radius_le_one

    def as_dict(self) -> dict:
        return {
            "zero_diagonal": self.zero_diagonal,
            "nonnegative": self.nonnegative,
            "row_sums_one": self.row_sums_one,
            "spectral_radius_le_one": self.spectral_radius_le_one,
            "spectral_radius": self.spectral_radius,
        }


def validate_assumptions(W) -> AssumptionReport:
    """Check zero diagonal, nonnegativity, unit row sums and spectral radius.

    Accepts a :class:`WeightMatrix` or any square array; never raises on a
    failed check. Decay and column-sum conditions are asymptotic and are
    not examined.
    """
    m = np.asarray(W.matrix if isinstance(W, WeightMatrix) else W, dtype=float)
    radius = float(np.max(np.abs(np.linalg.eigvals(m))))
    return AssumptionReport(
        zero_diagonal=bool(np.all(np.diag(m) == 0)),
        nonnegative=bool(np.all(m >= 0)),
        row_sums_one=bool(np.max(np.abs(m.sum(axis=1) - 1.0)) < _ROW_SUM_TOL),
        spectral_radius_le_one=radius <= 1.0 + 1e-10,
        spectral_radius=radius,
    )

"""Synthetic problems, matrix operators, error metrics and dataset files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "SpectrumSpec",
    "SymmetricMatrix",
    "Dataset",
    "CovarianceOperator",
    "ZeroVectorError",
    "RankDeficientError",
    "as_operator",
    "generate_dataset",
    "random_orthonormal",
    "matrix_with_spectrum",
    "benchmark_spectrum",
    "sin2_error",
    "subspace_dist",
    "rayleigh_quotient",
    "save_dataset",
    "load_dataset",
    "save_matrix",
    "load_matrix",
    "export_csv",
]

MAGIC = b"MPCA"
_HEADER = struct.Struct("<4sIQI")
VERSION_DATASET = 1
# A SymmetricMatrix is stored in the same container with n == d; the version
# field doubles as the symmetry flag.
VERSION_SYMMETRIC = 2


class ZeroVectorError(ValueError):
    pass


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class SpectrumSpec:
    eigenvalues: tuple
    seed: int = 0

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("eigenvalues must be a nonempty 1-D sequence")
        if np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be sorted in descending order")
        if lam[0] > 1 or lam[-1] < 0:
            raise ValueError("eigenvalues must lie in [0, 1]")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "eigenvalues", tuple(float(v) for v in lam))

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)

    @property
    def gap(self) -> float:
        lam = self.eigenvalues
        return lam[0] - lam[1] if len(lam) > 1 else lam[0]


def benchmark_spectrum(d: int = 10, top: float = 1.0, rest: float = 0.9, seed: int = 0):
    """The Delta = 0.1 benchmark spectrum: one eigenvalue ``top``, the rest ``rest``."""
    return SpectrumSpec((top,) + (rest,) * (d - 1), seed)


class SymmetricMatrix:
    """Dense symmetric matrix with lazily cached eigendecomposition."""

    def __init__(self, entries):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("expected a square matrix")
        self.entries = 0.5 * (a + a.T)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def matvec(self, v):
        return self.entries @ v

    matmat = matvec

    @cached_property
    def _eigh(self):
        lam, vec = np.linalg.eigh(self.entries)
        order = np.argsort(lam)[::-1]
        return lam[order], vec[:, order]

    @property
    def eigenvalues(self):
        return self._eigh[0]

    @property
    def eigenvectors(self):
        return self._eigh[1]

    @property
    def top_eigenvector(self):
        return self._eigh[1][:, 0]

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.eigenvalues)))


@dataclass
class Dataset:
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=float)
        if self.rows.ndim != 2:
            raise ValueError("dataset rows must form a 2-D array")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def covariance(self) -> SymmetricMatrix:
        return SymmetricMatrix(self.rows.T @ self.rows / self.n)


class CovarianceOperator:
    """``(1/n) X^T X`` applied as two passes over the rows, never materialized."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset

    @property
    def dim(self) -> int:
        return self.dataset.dim

    def matvec(self, v):
        X = self.dataset.rows
        return X.T @ (X @ v) / X.shape[0]

    matmat = matvec


def as_operator(A):
    """Wrap ndarrays as SymmetricMatrix; pass anything with ``matvec`` through."""
    if hasattr(A, "matvec"):
        return A
    if isinstance(A, Dataset):
        return CovarianceOperator(A)
    return SymmetricMatrix(A)


def random_orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Thin QR of a Gaussian matrix with the diagonal of R made positive."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def matrix_with_spectrum(eigenvalues, seed: int = 0) -> SymmetricMatrix:
    """Dense ``V diag(eigenvalues) V^T`` with a seeded random orthogonal V."""
    lam = np.asarray(eigenvalues, dtype=float)
    V = random_orthonormal(np.random.default_rng(seed), lam.size, lam.size)
    return SymmetricMatrix((V * lam) @ V.T)


def generate_dataset(spec: SpectrumSpec, n: int) -> Dataset:
    """Draw ``X = sqrt(n) U diag(sqrt(lambda)) V^T``.

    U is n x d with orthonormal columns and V is d x d orthogonal, so the
    sample covariance ``X^T X / n`` has exactly the requested spectrum.
    """
    d = spec.dim
    if n < d:
        raise ValueError(f"need n >= d to build orthonormal U (n={n}, d={d})")
    rng = np.random.default_rng(spec.seed)
    U = random_orthonormal(rng, n, d)
    V = random_orthonormal(rng, d, d)
    sigma = np.sqrt(np.asarray(spec.eigenvalues))
    return Dataset(np.sqrt(n) * (U * sigma) @ V.T)


def sin2_error(u1, w) -> float:
    """Squared sine of the angle between ``u1`` (unit) and ``w``.

    Mathematically ``1 - (u1^T w)^2 / ||w||^2``.  It is evaluated as the
    squared norm of the component of ``w`` orthogonal to ``u1`` so that
    tiny errors keep their relative precision; the result is clamped to
    [0, 1].
    """
    w = np.asarray(w, dtype=float)
    nw2 = float(w @ w)
    if nw2 == 0.0:
        raise ZeroVectorError("sin2_error of the zero vector is undefined")
    resid = w - (u1 @ w) * u1
    return min(1.0, max(0.0, float(resid @ resid) / nw2))


def _orth(S, tol=1e-12):
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    q, r = np.linalg.qr(S)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= tol * max(diag.max(), 1.0):
        raise RankDeficientError("basis does not have full column rank")
    return q


def subspace_dist(S1, S2) -> float:
    """Spectral norm of the difference of the projectors onto range(S1), range(S2)."""
    Q1, Q2 = _orth(S1), _orth(S2)
    if Q1.shape != Q2.shape:
        raise ValueError("subspaces must have the same dimension")
    diff = Q1 @ Q1.T - Q2 @ Q2.T
    return float(min(1.0, np.linalg.norm(diff, 2)))


def rayleigh_quotient(A, w) -> float:
    w = np.asarray(w, dtype=float)
    nw2 = float(w @ w)
    if nw2 == 0.0:
        raise ZeroVectorError("Rayleigh quotient of the zero vector is undefined")
    return float(w @ as_operator(A).matvec(w)) / nw2


def _write(path, version, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    n, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, n, d))
        fh.write(arr.tobytes())


def _read(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, n, d = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        body = fh.read()
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: expected {n * d} float64 values, found {len(body) // 8}")
    return version, np.frombuffer(body, dtype="<f8").reshape(n, d).astype(float)


def save_dataset(dataset: Dataset, path) -> None:
    _write(path, VERSION_DATASET, dataset.rows)


def load_dataset(path) -> Dataset:
    version, rows = _read(path)
    if version != VERSION_DATASET:
        raise ValueError(f"{path}: not a dataset file (version {version})")
    return Dataset(rows)


def save_matrix(A: SymmetricMatrix, path) -> None:
    _write(path, VERSION_SYMMETRIC, as_operator(A).entries)


def load_matrix(path) -> SymmetricMatrix:
    version, entries = _read(path)
    if version != VERSION_SYMMETRIC or entries.shape[0] != entries.shape[1]:
        raise ValueError(f"{path}: not a symmetric matrix file")
    return SymmetricMatrix(entries)


def export_csv(dataset: Dataset, path) -> None:
    np.savetxt(Path(path), dataset.rows, delimiter=",", fmt="%.17g")

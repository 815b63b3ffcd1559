"""Momentum polynomials, Chebyshev polynomials and orthonormal bases.

The momentum recurrence

    p_{t+1}(x) = x p_t(x) - beta p_{t-1}(x)

drives every solver in this package.  Two start conventions appear:

* ``p_1 = x / 2`` ("half start").  This is the scaled Chebyshev family of
  the first kind, ``p_t(x) = sqrt(beta)^t T_t(x / (2 sqrt(beta)))``, and
  describes the deterministic solver started with a half first step.
* ``p_1 = x`` ("full start").  This is the scaled second-kind family
  ``sqrt(beta)^t U_t(x / (2 sqrt(beta)))``.  It is the mean propagator of
  the stochastic recurrence ``F_{t+1} = A_{t+1} F_t - beta F_{t-1}`` with
  ``F_0 = I`` and ``F_{-1} = 0``; the covariance bounds are written with it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MomentumPolyParams",
    "OrthoPolyBasis",
    "InsufficientCoefficientsError",
    "momentum_poly_recur",
    "momentum_poly_closed",
    "momentum_propagator",
    "chebyshev_T",
    "chebyshev_U",
    "ortho_basis_eval",
    "ortho_basis_values",
    "legendre_basis",
    "matrix_poly_apply",
]

# |x^2 - 4 beta| below this is treated as the double-root case.
_KNEE_TOL = 1e-12


class InsufficientCoefficientsError(ValueError):
    """Raised when a basis is evaluated past its stored recurrence."""


@dataclass(frozen=True)
class MomentumPolyParams:
    beta: float
    degree: int

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"degree must be a nonnegative integer, got {self.degree}")


def _three_term(x, degree, first, beta):
    """Run ``p_{k+1} = x p_k - beta p_{k-1}`` from ``p_0 = 1``, ``p_1 = first``."""
    if degree == 0:
        return np.ones_like(x) if isinstance(x, np.ndarray) else 1.0
    prev, cur = 1.0, first
    for _ in range(degree - 1):
        prev, cur = cur, x * cur - beta * prev
    return cur


def momentum_poly_recur(params: MomentumPolyParams, x):
    """Evaluate ``p_t(x)`` with ``p_0 = 1``, ``p_1 = x / 2`` by recurrence.

    ``x`` may be a scalar or an ndarray (evaluated elementwise).
    """
    return _three_term(x, params.degree, x / 2.0, params.beta)


def momentum_propagator(params: MomentumPolyParams, x):
    """Evaluate the full-start family ``p_0 = 1``, ``p_1 = x`` by recurrence."""
    return _three_term(x, params.degree, x, params.beta)


def momentum_poly_closed(params: MomentumPolyParams, x: float) -> float:
    """Closed form of the half-start momentum polynomial.

    Outside the calm region (``|x| > 2 sqrt(beta)``) this is the average of
    the t-th powers of the two real roots of ``mu^2 - x mu + beta``; inside it
    is ``sqrt(beta)^t cos(t arccos(x / (2 sqrt(beta))))``.  At the knee the
    limit ``(sign(x) sqrt(beta))^t`` is returned.
    """
    beta, t = params.beta, params.degree
    if beta <= 0:
        raise ValueError("closed form needs beta > 0; use momentum_poly_recur")
    x = float(x)
    disc = x * x - 4.0 * beta
    sb = math.sqrt(beta)
    if abs(disc) < _KNEE_TOL:
        return math.copysign(sb, x) ** t
    if disc > 0:
        root = math.sqrt(disc)
        return 0.5 * (((x - root) / 2.0) ** t + ((x + root) / 2.0) ** t)
    z = min(1.0, max(-1.0, x / (2.0 * sb)))
    return sb**t * math.cos(t * math.acos(z))


def chebyshev_T(t: int, z):
    """Chebyshev polynomial of the first kind by recurrence."""
    if t < 0:
        raise ValueError("degree must be nonnegative")
    if t == 0:
        return np.ones_like(z) if isinstance(z, np.ndarray) else 1.0
    prev, cur = 1.0, z
    for _ in range(t - 1):
        prev, cur = cur, 2.0 * z * cur - prev
    return cur


def chebyshev_U(t: int, z):
    """Chebyshev polynomial of the second kind by recurrence."""
    if t < 0:
        raise ValueError("degree must be nonnegative")
    if t == 0:
        return np.ones_like(z) if isinstance(z, np.ndarray) else 1.0
    prev, cur = 1.0, 2.0 * z
    for _ in range(t - 1):
        prev, cur = cur, 2.0 * z * cur - prev
    return cur


@dataclass(frozen=True)
class OrthoPolyBasis:
    """Orthonormal polynomial family given by its three-term recurrence.

    ``q_{n+1}(x) = (a_n x + c_n) q_n(x) - b_n q_{n-1}(x)`` with ``q_0 = 1``
    and ``q_{-1} = 0``; the measure is a probability measure so ``q_0`` is
    already normalized.  Coefficient ``n`` is needed to reach degree
    ``n + 1``.
    """

    coeff_a: tuple
    coeff_b: tuple
    coeff_c: tuple
    measure_name: str = "custom"
    support: tuple = field(default=(-np.inf, np.inf))

    def __post_init__(self):
        if not len(self.coeff_a) == len(self.coeff_b) == len(self.coeff_c):
            raise ValueError("coefficient sequences must have equal length")

    @property
    def max_degree(self) -> int:
        return len(self.coeff_a)

    def coefficients(self, n: int):
        if n >= self.max_degree:
            raise InsufficientCoefficientsError(
                f"basis {self.measure_name!r} has coefficients for degree <= "
                f"{self.max_degree}, needed index {n}"
            )
        return self.coeff_a[n], self.coeff_b[n], self.coeff_c[n]


def legendre_basis(max_degree: int = 256) -> OrthoPolyBasis:
    """Orthonormal Legendre family for the uniform probability measure on [-1, 1].

    ``q_n = sqrt(2n + 1) P_n``.  Substituting into Bonnet's recurrence
    ``(n + 1) P_{n+1} = (2n + 1) x P_n - n P_{n-1}`` gives the coefficients
    below.
    """
    n = np.arange(max_degree, dtype=float)
    a = np.sqrt(2 * n + 3) * np.sqrt(2 * n + 1) / (n + 1)
    b = np.zeros(max_degree)
    b[1:] = n[1:] * np.sqrt(2 * n[1:] + 3) / ((n[1:] + 1) * np.sqrt(2 * n[1:] - 1))
    c = np.zeros(max_degree)
    return OrthoPolyBasis(tuple(a), tuple(b), tuple(c), "legendre", (-1.0, 1.0))


def ortho_basis_values(basis: OrthoPolyBasis, n: int, x):
    """Return ``[q_0(x), ..., q_n(x)]`` stacked along the first axis."""
    if n < 0:
        raise ValueError("degree must be nonnegative")
    if n > basis.max_degree:
        basis.coefficients(n - 1)  # raises
    x = np.asarray(x, dtype=float)
    out = np.empty((n + 1,) + x.shape)
    out[0] = 1.0
    prev = np.zeros_like(x)
    for k in range(n):
        a, b, c = basis.coefficients(k)
        out[k + 1] = (a * x + c) * out[k] - b * prev
        prev = out[k]
    return out


def ortho_basis_eval(basis: OrthoPolyBasis, n: int, x):
    """Evaluate the degree-``n`` member of ``basis`` at ``x``."""
    vals = ortho_basis_values(basis, n, x)[n]
    return float(vals) if vals.ndim == 0 else vals


def matrix_poly_apply(eigvals, eigvecs, values_fn, w):
    """Apply ``f(A) w`` through an eigendecomposition ``A = V diag(l) V^T``.

    ``values_fn`` maps the eigenvalue array to ``f(l)``.  Used as an oracle
    that is independent of any iterative recurrence on vectors.
    """
    coords = eigvecs.T @ w
    return eigvecs @ (values_fn(np.asarray(eigvals)) * coords)

"""Covariance of the random momentum recurrence and its bounds.

The recurrence is ``F_{t+1} = A_{t+1} F_t - beta F_{t-1}`` with ``F_0 = I``,
``F_{-1} = 0`` and i.i.d. ``A_t`` of mean ``A``.  Its mean is ``p_t(A)`` for
the full-start momentum polynomial.  Three independent routes to the
second moment live here:

* the composition series
  ``sum_n ||Sigma||^n beta^(t-n) sum_{k in S(n+1, t-n)} prod_i U_{k_i}^2(lam1 / (2 sqrt(beta)))``,
* the closed exponential bound (and its small-noise linearization),
* direct simulation of the recurrence, exhaustive over all outcome paths
  when the law is finite and small, or Monte Carlo otherwise.

With a variance-reduction anchor ``w0`` the samples act as
``A + (B - A)(I - w0 w0^T)`` and the quantity of interest is the covariance
of the vector ``F_t w0``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .oracles import substream
from .polynomials import MomentumPolyParams, chebyshev_U, momentum_propagator
from .spectral import SymmetricMatrix, as_operator

__all__ = [
    "RecurrenceModel",
    "CovarianceReport",
    "BudgetExceededError",
    "composition_count",
    "covariance_series_bound",
    "covariance_closed_bound",
    "simulate_covariance",
    "vr_covariance_bound",
    "covariance_report",
    "denominator_check",
    "numerator_check",
    "two_point_model",
]

MAX_SERIES_DEGREE = 14
COMPOSITION_BUDGET = 10**6
PATH_BUDGET = 10**7


class BudgetExceededError(ValueError):
    pass


@dataclass
class RecurrenceModel:
    """Finite sample law for the random recurrence.

    ``law`` is a list of ``(matrix, probability)`` pairs whose weighted mean
    must equal ``A``.  ``vr_anchor`` switches to the anchored operator.
    """

    A: SymmetricMatrix
    law: list
    beta: float
    vr_anchor: np.ndarray | None = None

    def __post_init__(self):
        self.A = as_operator(self.A)
        mats = np.array([np.atleast_2d(np.asarray(m, dtype=float)) for m, _ in self.law])
        probs = np.array([float(p) for _, p in self.law])
        d = self.A.dim
        if mats.shape[1:] != (d, d):
            raise ValueError("law matrices must match the dimension of A")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("law probabilities must be nonnegative and sum to 1")
        mean = np.tensordot(probs, mats, axes=1)
        if np.max(np.abs(mean - self.A.entries)) > 1e-12:
            raise ValueError("law is not unbiased: its mean differs from A")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        self.matrices = mats
        self.probs = probs
        if self.vr_anchor is not None:
            w = np.asarray(self.vr_anchor, dtype=float).reshape(d)
            self.vr_anchor = w / np.linalg.norm(w)

    @property
    def dim(self) -> int:
        return self.A.dim

    @property
    def lam1(self) -> float:
        return float(self.A.eigenvalues[0])

    def sigma_norm(self) -> float:
        """Exact ``||E[(A_t - A) kron (A_t - A)]||`` over the finite law."""
        return _kron_cov_norm(self.matrices - self.A.entries, self.probs)

    def theta(self) -> float:
        if self.vr_anchor is None:
            raise ValueError("model has no anchor")
        return 1.0 - float(self.A.top_eigenvector @ self.vr_anchor) ** 2

    def step_matrices(self) -> np.ndarray:
        """Matrices actually applied at each step (anchored if VR)."""
        if self.vr_anchor is None:
            return self.matrices
        w = self.vr_anchor
        proj = np.eye(self.dim) - np.outer(w, w)
        return self.A.entries + (self.matrices - self.A.entries) @ proj


def two_point_model(A, E, beta, vr_anchor=None) -> RecurrenceModel:
    """The equiprobable law ``{A + E, A - E}``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    E = np.atleast_2d(np.asarray(E, dtype=float))
    return RecurrenceModel(SymmetricMatrix(A), [(A + E, 0.5), (A - E, 0.5)], beta, vr_anchor)


def _kron_cov_norm(devs, probs) -> float:
    """Spectral norm of ``sum_i p_i D_i kron D_i`` for square deviations ``D_i``."""
    d = devs.shape[1]
    mat = np.einsum("s,sij,skl->ikjl", probs, devs, devs).reshape(d * d, d * d)
    return float(np.linalg.norm(mat, 2))


def _u2_values(lam1, beta, t):
    z = lam1 / (2.0 * math.sqrt(beta))
    return tuple(float(chebyshev_U(k, z)) ** 2 for k in range(t + 1))


def composition_count(t: int) -> int:
    """Total number of compositions the degree-``t`` series sums over."""
    return sum(math.comb(t, n) for n in range(1, t + 1))


def _check_series_args(lam1, beta, t):
    if beta <= 0:
        raise ValueError("series needs beta > 0")
    if lam1 * lam1 < 4.0 * beta:
        raise ValueError(f"need lambda1^2 >= 4 beta, got lambda1={lam1}, beta={beta}")
    if t < 1 or t > MAX_SERIES_DEGREE or composition_count(t) > COMPOSITION_BUDGET:
        raise BudgetExceededError(f"series degree must lie in [1, {MAX_SERIES_DEGREE}], got {t}")


def _series(lam1, beta, sigma_norm, t):
    _check_series_args(lam1, beta, t)
    u2 = _u2_values(lam1, beta, t)

    @lru_cache(maxsize=None)
    def comp_sum(parts, total):
        # sum over k in N^parts with sum(k) = total of prod u2[k_i]
        if parts == 1:
            return u2[total]
        return sum(u2[j] * comp_sum(parts - 1, total - j) for j in range(total + 1))

    return sum(sigma_norm**n * beta ** (t - n) * comp_sum(n + 1, t - n) for n in range(1, t + 1))


def covariance_series_bound(model: RecurrenceModel, sigma_norm: float, t: int) -> float:
    """Composition-series bound on ``||E[F_t kron F_t] - E[F_t] kron E[F_t]||``."""
    return _series(model.lam1, model.beta, sigma_norm, t)


def covariance_closed_bound(lam1, beta, sigma_norm, t):
    """General and small-noise closed bounds.

    Returns ``(general, small)`` with
    ``general = p_t(lam1)^2 (exp(4 ||Sigma|| t / g) - 1)`` and
    ``small = p_t(lam1)^2 8 ||Sigma|| t / g`` (``None`` unless
    ``4 ||Sigma|| t <= g``), where ``g = lam1^2 - 4 beta`` and ``p_t`` is
    the full-start momentum polynomial.
    """
    g = lam1 * lam1 - 4.0 * beta
    if g <= 0:
        raise ValueError("need lambda1^2 > 4 beta")
    p2 = momentum_propagator(MomentumPolyParams(beta, t), lam1) ** 2
    expo = 4.0 * sigma_norm * t / g
    # a bound that overflows is no bound at all
    general = p2 * math.expm1(expo) if expo < 700 else math.inf
    small = p2 * 8.0 * sigma_norm * t / g if 4.0 * sigma_norm * t <= g else None
    return general, small


def vr_covariance_bound(model: RecurrenceModel, sigma_norm: float, t: int, theta=None) -> float:
    """``4 theta`` times the series bound for the anchored recurrence."""
    if model.vr_anchor is None and theta is None:
        raise ValueError("vr bound needs an anchor or an explicit theta")
    if theta is None:
        theta = model.theta()
    return 4.0 * theta * _series(model.lam1, model.beta, sigma_norm, t)


def _propagate(mats, probs, beta, F, Fprev, P, steps):
    """Expand every path by ``steps`` more draws."""
    m = len(probs)
    for _ in range(steps):
        n = F.shape[0]
        nxt = np.einsum("aij,njk->anik", mats, F) - beta * Fprev[None]
        P = (probs[:, None] * P[None]).reshape(m * n)
        Fprev = np.broadcast_to(F[None], (m,) + F.shape).reshape((m * n,) + F.shape[1:])
        F = nxt.reshape((m * n,) + F.shape[1:])
    return F, Fprev, P


def _exhaustive_paths(model, t, threads=0):
    mats = model.step_matrices()
    probs = model.probs
    d = model.dim
    F = np.eye(d)[None]
    Fprev = np.zeros((1, d, d))
    P = np.ones(1)
    if t == 0:
        return F, P
    if threads > 1 and len(probs) > 1:
        # one branch per first-step outcome; concatenated in branch order so
        # the result does not depend on scheduling
        def branch(a):
            return _propagate(mats, probs, model.beta, mats[a][None], np.eye(d)[None],
                              np.array([probs[a]]), t - 1)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(branch, range(len(probs))))
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[2] for p in parts])
    F, _, P = _propagate(mats, probs, model.beta, F, Fprev, P, t)
    return F, P


def _cov_norm(samples, weights, vector):
    mean = np.tensordot(weights, samples, axes=1)
    devs = samples - mean
    if vector:
        cov = np.einsum("s,si,sj->ij", weights, devs, devs)
        return float(np.linalg.norm(cov))
    return _kron_cov_norm(devs, weights)


def simulate_covariance(model: RecurrenceModel, t: int, exhaustive=True, replicates=10_000,
                        seed=0, threads=0):
    """Covariance norm of ``F_t`` (or of ``F_t w0`` with an anchor).

    Exhaustive mode weights every outcome path by its probability and is
    exact up to rounding; it needs ``len(law)**t <= 1e7``.  Monte-Carlo mode
    draws ``replicates`` independent paths and also returns a standard error
    from 20 batch estimates.

    Returns ``(norm, stderr)``; ``stderr`` is 0 in exhaustive mode.
    """
    vector = model.vr_anchor is not None
    if exhaustive:
        if len(model.probs) ** t > PATH_BUDGET:
            raise BudgetExceededError(f"{len(model.probs)}^{t} paths exceed {PATH_BUDGET}")
        F, P = _exhaustive_paths(model, t, threads)
        samples = F @ model.vr_anchor if vector else F
        return _cov_norm(samples, P, vector), 0.0

    if replicates < 40:
        raise ValueError("Monte-Carlo mode needs at least 40 replicates")
    rng = substream(seed, 11)
    mats = model.step_matrices()
    d = model.dim
    F = np.broadcast_to(np.eye(d), (replicates, d, d)).copy()
    Fprev = np.zeros_like(F)
    for _ in range(t):
        pick = rng.choice(len(model.probs), size=replicates, p=model.probs)
        F, Fprev = mats[pick] @ F - model.beta * Fprev, F
    samples = F @ model.vr_anchor if vector else F
    w = np.full(replicates, 1.0 / replicates)
    est = _cov_norm(samples, w, vector)
    batches = np.array_split(np.arange(replicates), 20)
    sub = [_cov_norm(samples[b], np.full(b.size, 1.0 / b.size), vector) for b in batches]
    return est, float(np.std(sub, ddof=1) / math.sqrt(len(sub)))


@dataclass(frozen=True)
class CovarianceReport:
    t: int
    series_bound: float
    closed_bound: float
    small_noise_bound: float | None
    simulated: float
    stderr: float
    exact_scalar: bool


def covariance_report(model: RecurrenceModel, t: int, sigma_norm=None, exhaustive=True,
                      replicates=10_000, seed=0) -> CovarianceReport:
    """All three routes at degree ``t`` for one model."""
    if sigma_norm is None:
        sigma_norm = model.sigma_norm()
    if model.vr_anchor is None:
        series = covariance_series_bound(model, sigma_norm, t)
        scale = 1.0
    else:
        series = vr_covariance_bound(model, sigma_norm, t)
        scale = 4.0 * model.theta()
    general, small = covariance_closed_bound(model.lam1, model.beta, sigma_norm, t)
    sim, err = simulate_covariance(model, t, exhaustive, replicates, seed)
    return CovarianceReport(t, series, scale * general,
                            None if small is None else scale * small,
                            sim, err, model.dim == 1 and model.vr_anchor is None and exhaustive)


def _projections(model, w0, t):
    F, P = _exhaustive_paths(model, t)
    vecs = F @ np.asarray(w0, dtype=float)
    U = model.A.eigenvectors
    return vecs @ U, P


def denominator_check(model: RecurrenceModel, w0, t: int):
    """``(Var(u1^T F_t w0), p_t(lam1)^2 8 ||Sigma|| t / g)`` by exhaustive simulation.

    The bound is ``None`` when the small-noise condition fails.
    """
    coords, P = _projections(model, w0, t)
    c1 = coords[:, 0]
    mean = float(P @ c1)
    var = float(P @ (c1 - mean) ** 2)
    _, small = covariance_closed_bound(model.lam1, model.beta, model.sigma_norm(), t)
    return var, small


def numerator_check(model: RecurrenceModel, w0, t: int):
    """``(E sum_{i>=2} (u_i^T F_t w0)^2, bound)`` by exhaustive simulation."""
    coords, P = _projections(model, w0, t)
    lhs = float(P @ np.sum(coords[:, 1:] ** 2, axis=1))
    lam1, beta = model.lam1, model.beta
    params = MomentumPolyParams(beta, t)
    p1 = momentum_propagator(params, lam1) ** 2
    pk = momentum_propagator(params, 2.0 * math.sqrt(beta)) ** 2
    g = lam1 * lam1 - 4.0 * beta
    bound = p1 * (8.0 * math.sqrt(model.dim) * model.sigma_norm() * t / g + pk / p1)
    return lhs, bound

"""Momentum auto-tuning and the inhomogeneous optimal-filter recurrence.

``best_heavy_ball`` adapts beta without spectral knowledge by probing a
few multipliers around the current value and keeping the one whose short
run reaches the largest Rayleigh quotient.

``inhomo_iterate`` applies the expected-loss optimal polynomial filter

    f_t(x) = sum_{i<=t} q_i(lam) q_i(x) / R_t,   R_t = sum_{j<=t} q_j(lam)^2

for an orthonormal family ``q`` of an assumed eigenvalue measure and an
underestimate ``lam`` of the top eigenvalue.  ``four_term_iterate`` reaches
the same iterates through the equivalent four-term recurrence on ``f``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .deterministic import power_iterate
from .polynomials import OrthoPolyBasis, ortho_basis_values
from .spectral import SymmetricMatrix, as_operator, rayleigh_quotient, sin2_error
from .stochastic import initial_vector
from .trace import ConvergenceTrace, SolverReport

__all__ = [
    "TunerConfig",
    "TunerResult",
    "best_heavy_ball",
    "InhomoState",
    "inhomo_iterate",
    "four_term_iterate",
    "optimal_filter_loss",
    "filter_loss",
    "default_lambda_estimate",
]

log = logging.getLogger(__name__)

RESCALE_ABOVE = 1e100


@dataclass(frozen=True)
class TunerConfig:
    rounds: int = 10
    probe_steps: int = 10
    multipliers: tuple = (2.0 / 3.0, 0.99, 1.0, 1.01, 1.5)
    block_size: int = 1

    def __post_init__(self):
        if 1.0 not in self.multipliers:
            raise ValueError("multipliers must contain 1.0")
        if self.probe_steps < 1 or self.rounds < 1:
            raise ValueError("rounds and probe_steps must be positive")
        if self.block_size != 1:
            raise ValueError("only single-vector tuning (block_size=1) is supported")

    @property
    def budget(self) -> int:
        """Matrix-vector products spent by the probes."""
        return self.rounds * len(self.multipliers) * self.probe_steps


@dataclass
class TunerResult:
    w: np.ndarray
    beta: float
    rayleigh: float
    betas: list = field(default_factory=list)
    rayleighs: list = field(default_factory=list)
    matvec_count: int = 0


def _probe(op, w, w_prev, beta, steps):
    for _ in range(steps):
        nxt = op.matvec(w) - beta * w_prev
        scale = np.linalg.norm(nxt)
        w, w_prev = nxt / scale, w / scale
    return w, w_prev, float(w @ op.matvec(w))


def best_heavy_ball(A, cfg: TunerConfig = TunerConfig(), seed: int = 0, w0=None) -> TunerResult:
    """Tune momentum on the fly; returns the best iterate and the final beta.

    beta starts at ``mu^2 / 4`` with ``mu`` the Rayleigh quotient of the
    random start.  Every round runs ``probe_steps`` momentum steps for each
    multiplier of the current beta, all from the same state, then moves
    beta and the state to the probe with the largest Rayleigh quotient
    (ties go to the smaller multiplier).  The first round starts with
    ``w_{-1} = 0``.  The returned iterate is the best one seen.
    """
    op = as_operator(A)
    w = initial_vector(op.dim, seed) if w0 is None else np.asarray(w0, float) / np.linalg.norm(w0)
    mu = rayleigh_quotient(op, w)
    beta = mu * mu / 4.0
    current = (w, np.zeros_like(w), mu)
    best = current
    res = TunerResult(w, beta, mu)
    order = sorted(range(len(cfg.multipliers)), key=lambda i: cfg.multipliers[i])
    for _ in range(cfg.rounds):
        probes = [_probe(op, current[0], current[1], m * beta, cfg.probe_steps)
                  for m in cfg.multipliers]
        res.matvec_count += len(probes) * cfg.probe_steps
        # deterministic reduction: max quotient, then smallest multiplier
        pick = max(order, key=lambda i: (probes[i][2], -cfg.multipliers[i]))
        beta = cfg.multipliers[pick] * beta
        current = probes[pick]
        if current[2] >= best[2]:
            best = current
        res.betas.append(beta)
        res.rayleighs.append(best[2])
    res.w, res.beta, res.rayleigh = best[0], beta, best[2]
    return res


def default_lambda_estimate(A, w0, steps=10) -> float:
    """Rayleigh quotient after a short power-iteration warm start (an underestimate)."""
    rep = power_iterate(A, w0, steps, diagnostics=False)
    return rayleigh_quotient(A, rep.estimate)


def _check_estimate(op, lam):
    if not isinstance(op, SymmetricMatrix) or "_eigh" not in op.__dict__:
        return
    ev = op.eigenvalues
    if ev.size > 1 and not ev[1] <= lam < ev[0]:
        log.warning("lambda estimate %g outside [lambda2, lambda1) = [%g, %g)", lam, ev[1], ev[0])


@dataclass
class InhomoState:
    """Carried state of the optimal-filter recurrence at step t.

    ``w`` and ``p`` are ``f_t(A) w0`` and ``q_t(A) w0`` (``p_prev`` is
    ``q_{t-1}(A) w0``) up to one common scale; ``p_scalar``/``p_scalar_prev``
    are ``q_t(lam)``, ``q_{t-1}(lam)`` and ``r_scalar`` is ``sum_{j<=t} q_j(lam)^2``,
    again up to a common rescaling.
    """

    w: np.ndarray
    p: np.ndarray
    p_prev: np.ndarray
    p_scalar: float
    p_scalar_prev: float
    r_scalar: float
    lambda1_est: float
    t: int = 0

    def rescale(self):
        # scaling every q-term by c and r by c^2 leaves w unchanged
        c = 1.0 / math.sqrt(self.r_scalar)
        self.p, self.p_prev = self.p * c, self.p_prev * c
        self.p_scalar, self.p_scalar_prev = self.p_scalar * c, self.p_scalar_prev * c
        self.r_scalar = 1.0


def _trace_row(trace, op, u1, w, t):
    s2 = sin2_error(u1, w) if u1 is not None else float("nan")
    trace.append(t, s2, rayleigh_quotient(op, w), t)


def inhomo_iterate(A, basis: OrthoPolyBasis, w0, T, lambda1_est=None, u1=None,
                   keep_history=False) -> SolverReport:
    """Optimal-filter power method; returns ``f_T(A) w0`` normalized.

    Starting values are ``q_0 = 1``, ``q_1 = a_0 x + c_0`` and
    ``r_1 = q_0(lam)^2 + q_1(lam)^2``.  Each later step advances the basis by
    its three-term recurrence and updates

        r_{t+1} = r_t + q_{t+1}(lam)^2
        w_{t+1} = w_t r_t / r_{t+1} + q_{t+1}(A) w0 q_{t+1}(lam) / r_{t+1}

    after which every carried vector is divided by ``||w_{t+1}||``.
    """
    op = as_operator(A)
    w0 = np.asarray(w0, dtype=float)
    w0 = w0 / np.linalg.norm(w0)
    if lambda1_est is None:
        lambda1_est = default_lambda_estimate(op, w0)
    _check_estimate(op, lambda1_est)
    if u1 is None and isinstance(op, SymmetricMatrix):
        u1 = op.top_eigenvector
    lam = float(lambda1_est)
    trace = ConvergenceTrace()
    history = [w0.copy()] if keep_history else None
    state = InhomoState(w0.copy(), w0.copy(), np.zeros_like(w0), 1.0, 0.0, 1.0, lam)
    for t in range(T):
        a, b, c = basis.coefficients(t)
        p_next = a * op.matvec(state.p) + c * state.p - b * state.p_prev
        ps_next = (a * lam + c) * state.p_scalar - b * state.p_scalar_prev
        r_next = state.r_scalar + ps_next * ps_next
        w_next = state.w * (state.r_scalar / r_next) + p_next * (ps_next / r_next)
        scale = np.linalg.norm(w_next)
        if scale == 0 or not np.isfinite(scale):
            raise ArithmeticError(f"iterate norm became {scale} at step {t + 1}")
        state.w = w_next / scale
        state.p_prev, state.p = state.p / scale, p_next / scale
        state.p_scalar_prev, state.p_scalar = state.p_scalar, ps_next
        state.r_scalar = r_next
        state.t = t + 1
        if state.r_scalar > RESCALE_ABOVE:
            state.rescale()
        _trace_row(trace, op, u1, state.w, t + 1)
        if history is not None:
            history.append(state.w.copy())
    return SolverReport(state.w, trace, T, history, {"state": state})


def four_term_iterate(A, basis: OrthoPolyBasis, w0, T, lambda1_est) -> np.ndarray:
    """``f_T(A) w0`` direction through the four-term recurrence on ``f``.

    With ``P_n = q_n(lam)``, ``R_n = sum_{j<=n} P_j^2``, ``g = P_{n+2} / R_{n+2}``
    and ``(a, b, c)`` the basis coefficients of index ``n + 1``:

        f_{n+2} = [R_{n+1}/R_{n+2} + g (a x + c) R_{n+1}/P_{n+1}] f_{n+1}
                - [g (a x + c) R_n/P_{n+1} + g b R_n/P_n] f_n
                + [g b R_{n-1}/P_n] f_{n-1}

    ``f_0, f_1, f_2`` are formed directly from the basis.  Independent of
    :func:`inhomo_iterate` except for the basis coefficients.
    """
    op = as_operator(A)
    w0 = np.asarray(w0, dtype=float)
    w0 = w0 / np.linalg.norm(w0)
    lam = float(lambda1_est)
    P = ortho_basis_values(basis, max(T, 2), lam)
    R = np.cumsum(P**2)

    def direct(n):
        # q_0(A) w0, ..., q_n(A) w0 by the basis recurrence
        vecs = [w0, np.zeros_like(w0)]
        out = w0 * P[0]
        for k in range(n):
            a, b, c = basis.coefficients(k)
            nxt = a * op.matvec(vecs[0]) + c * vecs[0] - b * vecs[1]
            vecs = [nxt, vecs[0]]
            out = out + nxt * P[k + 1]
        return out / R[n]

    if T <= 2:
        f = direct(T)
        return f / np.linalg.norm(f)
    f_m1, f_0, f_1 = direct(0), direct(1), direct(2)
    for n in range(1, T - 1):
        a, b, c = basis.coefficients(n + 1)
        g = P[n + 2] / R[n + 2]
        Af1, Af0 = op.matvec(f_1), op.matvec(f_0)
        f_2 = (R[n + 1] / R[n + 2] * f_1
               + g * R[n + 1] / P[n + 1] * (a * Af1 + c * f_1)
               - g * R[n] / P[n + 1] * (a * Af0 + c * f_0)
               - g * b * R[n] / P[n] * f_0
               + g * b * R[n - 1] / P[n] * f_m1)
        scale = np.linalg.norm(f_2)
        f_m1, f_0, f_1 = f_0 / scale, f_1 / scale, f_2 / scale
    return f_1


def optimal_filter_loss(basis: OrthoPolyBasis, lambda1: float, t: int) -> float:
    """``E[f_t(x)^2] / f_t(lambda1)^2`` of the optimal filter: ``1 / sum_{j<=t} q_j(lambda1)^2``."""
    q = ortho_basis_values(basis, t, float(lambda1))
    return 1.0 / float(np.sum(q**2))


def filter_loss(basis: OrthoPolyBasis, coeffs, lambda1: float) -> float:
    """Loss of ``f = sum_i coeffs[i] q_i`` normalized by ``f(lambda1)^2``.

    Orthonormality gives ``E[f^2] = sum_i coeffs[i]^2``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    q = ortho_basis_values(basis, coeffs.size - 1, float(lambda1))
    return float(coeffs @ coeffs) / float(coeffs @ q) ** 2

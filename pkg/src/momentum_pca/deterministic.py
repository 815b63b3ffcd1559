"""Deterministic power iteration, with and without momentum.

All single-vector solvers carry the pair ``(w_t, w_{t-1})`` and divide both
by ``||w_{t+1}||`` after each step.  Joint scaling leaves the direction of
every later iterate unchanged, so the normalized sequence is the same as
that of the unnormalized recurrence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .spectral import SymmetricMatrix, as_operator, rayleigh_quotient, sin2_error
from .trace import ConvergenceTrace, SolverReport

__all__ = [
    "RankCollapseError",
    "IterateState",
    "power_iterate",
    "power_momentum_iterate",
    "augmented_matrix",
    "augmented_power_iterate",
    "block_momentum_iterate",
    "momentum_rate",
    "momentum_sin2_bound",
    "iteration_budget",
    "block_bound",
    "iterations_to",
]

log = logging.getLogger(__name__)

STARTS = ("half", "zero")
# R factors with a larger condition estimate are treated as singular.
_MAX_COND = 1e14


class RankCollapseError(ArithmeticError):
    pass


@dataclass
class IterateState:
    w_curr: np.ndarray
    w_prev: np.ndarray
    iteration: int = 0

    def normalize(self):
        scale = np.linalg.norm(self.w_curr)
        if scale == 0 or not np.isfinite(scale):
            raise ArithmeticError(f"iterate norm became {scale}")
        self.w_curr = self.w_curr / scale
        self.w_prev = self.w_prev / scale
        return scale


def _truth(op, u1):
    if u1 is not None:
        return np.asarray(u1, dtype=float)
    if isinstance(op, SymmetricMatrix):
        return op.top_eigenvector
    return None


def _record(trace, op, u1, w, t, matvecs, diagnostics):
    if not diagnostics:
        trace.append(t, samples=matvecs)
        return
    s2 = sin2_error(u1, w) if u1 is not None else float("nan")
    trace.append(t, s2, rayleigh_quotient(op, w), matvecs)


def _stalled(trace, tol, window=10):
    rq = trace.rayleigh
    if tol is None or len(rq) <= window:
        return False
    tail = np.asarray(rq[-window - 1:])
    return bool(np.all(np.abs(np.diff(tail)) < tol))


def power_iterate(A, w0, T, u1=None, diagnostics=True, tol=None, keep_history=False):
    """Normalized power iteration ``w <- A w / ||A w||`` for ``T`` steps."""
    op = as_operator(A)
    u1 = _truth(op, u1)
    w = np.asarray(w0, dtype=float)
    w = w / np.linalg.norm(w)
    trace = ConvergenceTrace()
    history = [w.copy()] if keep_history else None
    for t in range(1, T + 1):
        y = op.matvec(w)
        ny = np.linalg.norm(y)
        if ny == 0:
            raise ArithmeticError("power iterate collapsed to zero")
        w = y / ny
        _record(trace, op, u1, w, t, t, diagnostics)
        if history is not None:
            history.append(w.copy())
        if _stalled(trace, tol):
            break
    return SolverReport(w, trace, len(trace), history)


def _warn_beta(op, beta):
    if not isinstance(op, SymmetricMatrix) or "_eigh" not in op.__dict__:
        return
    lam = op.eigenvalues
    if lam.size < 2:
        return
    lo, hi = lam[1] ** 2 / 4, lam[0] ** 2 / 4
    # eigenvalues carry rounding, so the lower end gets a little slack
    if not lo * (1 - 1e-12) <= beta < hi:
        log.warning("beta=%g outside [lambda2^2/4, lambda1^2/4) = [%g, %g)", beta, lo, hi)


def power_momentum_iterate(A, w0, beta, T, u1=None, start="half", diagnostics=True,
                           tol=None, keep_history=False, unnormalized=False):
    """Power iteration with momentum, ``w_{t+1} = A w_t - beta w_{t-1}``.

    Parameters
    ----------
    A : array_like or operator
        Symmetric target (anything with ``matvec`` is accepted).
    w0 : array_like
        Start vector; normalized on entry.
    beta : float
        Momentum parameter.
    T : int
        Number of steps.
    u1 : array_like, optional
        Ground-truth top eigenvector for the sin^2 column of the trace.
        Defaults to the cached eigenvector when ``A`` is a SymmetricMatrix.
    start : {"half", "zero"}
        ``"half"`` takes ``w_1 = A w_0 / 2`` so that ``w_t = p_t(A) w_0`` for
        the first-kind momentum polynomial.  ``"zero"`` sets ``w_{-1} = 0``
        (``w_1 = A w_0``) as the stochastic algorithms do.
    unnormalized : bool
        Skip the joint normalization (exposes ``p_t(A) w_0`` itself; only
        sensible for short runs).

    Returns
    -------
    SolverReport
        ``estimate`` is the final unit iterate.
    """
    if start not in STARTS:
        raise ValueError(f"start must be one of {STARTS}")
    op = as_operator(A)
    _warn_beta(op, beta)
    u1 = _truth(op, u1)
    w = np.asarray(w0, dtype=float)
    w = w / np.linalg.norm(w)
    state = IterateState(w, np.zeros_like(w))
    trace = ConvergenceTrace()
    history = [w.copy()] if keep_history else None
    for t in range(1, T + 1):
        y = op.matvec(state.w_curr)
        if t == 1 and start == "half":
            nxt = 0.5 * y
        else:
            nxt = y - beta * state.w_prev
        state.w_prev, state.w_curr = state.w_curr, nxt
        state.iteration = t
        if not unnormalized:
            state.normalize()
        _record(trace, op, u1, state.w_curr, t, t, diagnostics)
        if history is not None:
            history.append(state.w_curr.copy())
        if _stalled(trace, tol):
            break
    est = state.w_curr / np.linalg.norm(state.w_curr)
    return SolverReport(est, trace, len(trace), history, {"state": state})


def augmented_matrix(A, beta) -> np.ndarray:
    """The 2d x 2d block matrix ``[[A, -beta I], [I, 0]]``."""
    a = as_operator(A).entries
    d = a.shape[0]
    eye = np.eye(d)
    return np.block([[a, -beta * eye], [eye, np.zeros((d, d))]])


def augmented_power_iterate(A, beta, w0, T, u1=None, start="half", diagnostics=True,
                            keep_history=False):
    """Plain power iteration on the augmented block matrix, in operator form.

    The 2d-vector ``(x; y)`` maps to ``(A x - beta y; x)``.  With
    ``start="zero"`` the initial vector is ``(w_0; 0)``; ``"half"`` uses
    ``(w_0; A w_0 / (2 beta))`` so that the first step produces ``A w_0 / 2``.
    The top block reproduces the momentum iterates.
    """
    op = as_operator(A)
    u1 = _truth(op, u1)
    w = np.asarray(w0, dtype=float)
    w = w / np.linalg.norm(w)
    if start == "half" and beta > 0:
        tail = op.matvec(w) / (2.0 * beta)
    else:
        tail = np.zeros_like(w)
    z = np.concatenate([w, tail])
    z /= np.linalg.norm(z)
    d = w.size
    trace = ConvergenceTrace()
    history = [w.copy()] if keep_history else None
    for t in range(1, T + 1):
        top = op.matvec(z[:d]) - beta * z[d:]
        z = np.concatenate([top, z[:d]])
        z /= np.linalg.norm(z)
        x = z[:d] / np.linalg.norm(z[:d])
        _record(trace, op, u1, x, t, t, diagnostics)
        if history is not None:
            history.append(x)
    est = z[:d] / np.linalg.norm(z[:d])
    return SolverReport(est, trace, T, history, {"augmented": z})


def _qr_pos(M):
    q, r = np.linalg.qr(M)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, r * signs[:, None]


def block_momentum_iterate(A, W0, beta, T, stabilized=True, U=None, keep_history=False):
    """Block momentum iteration for the top-k eigenspace.

    The raw mode runs ``W_{t+1} = A W_t - beta W_{t-1}`` with ``W_1 = A W_0 / 2``
    and no normalization at all.  The stabilized mode starts from the same
    ``W_0, W_1`` and at every step factors the stacked ``2d x k`` matrix
    ``[A W_t - beta W_{t-1} R_t^{-1}; W_t]`` as ``Q R`` (positive diagonal).
    The two halves of ``Q`` become the new pair, so the stacked pair is
    orthonormal and its top half spans the same space as the raw iterate.

    ``U`` (d x k), when given, produces a trace of subspace distances in the
    ``sin2_error`` column.  ``estimate`` is an orthonormal basis for the
    final iterate's range.
    """
    from .spectral import subspace_dist

    op = as_operator(A)
    W0 = np.asarray(W0, dtype=float)
    if W0.ndim != 2:
        raise ValueError("W0 must be a d x k matrix")
    d, k = W0.shape
    if not 1 <= k < d:
        raise ValueError(f"block size must satisfy 1 <= k < d, got k={k}, d={d}")
    trace = ConvergenceTrace()
    prev, cur = np.zeros_like(W0), W0.copy()
    history = [W0.copy()] if keep_history else None
    matvecs = 0
    if T >= 1:
        prev, cur = cur, 0.5 * op.matmat(W0)
        matvecs = k
        if history is not None:
            history.append(cur.copy())
        if U is not None:
            trace.append(1, subspace_dist(cur, U), samples=matvecs)
    for t in range(2, T + 1):
        half = op.matmat(cur) - beta * prev
        matvecs += k
        if stabilized:
            Q, R = _qr_pos(np.vstack([half, cur]))
            if np.linalg.cond(R) > _MAX_COND:
                raise RankCollapseError(f"stacked QR became singular at step {t}")
            cur, prev = Q[:d], Q[d:]
        else:
            prev, cur = cur, half
        if history is not None:
            history.append(cur.copy())
        if U is not None:
            try:
                dist = subspace_dist(cur, U)
            except ValueError:
                dist = float("nan")
            trace.append(t, dist, samples=matvecs)
    estimate = None
    if np.all(np.isfinite(cur)):
        q, r = np.linalg.qr(cur)
        if np.abs(np.diag(r)).min() > 0:
            estimate = q
    return SolverReport(estimate, trace, matvecs, history, {"W": cur, "W_prev": prev})


def momentum_rate(lam1, beta) -> float:
    """Per-step contraction ``2 sqrt(beta) / (lam1 + sqrt(lam1^2 - 4 beta))``."""
    if lam1 * lam1 <= 4 * beta:
        raise ValueError("need lambda1^2 > 4 beta")
    return 2 * math.sqrt(beta) / (lam1 + math.sqrt(lam1 * lam1 - 4 * beta))


def momentum_sin2_bound(lam1, beta, w0_dot_u1, t) -> float:
    """Worst-case sin^2 after ``t`` momentum steps, ``4 rho^{2t} / (w0.u1)^2``."""
    return 4.0 / (w0_dot_u1 ** 2) * momentum_rate(lam1, beta) ** (2 * t)


def iteration_budget(lam1, beta, eps, C=8.0) -> float:
    """``C sqrt(beta) / sqrt(lam1^2 - 4 beta) * log(1/eps)``."""
    if lam1 * lam1 <= 4 * beta:
        raise ValueError("need lambda1^2 > 4 beta")
    return C * math.sqrt(beta) / math.sqrt(lam1 * lam1 - 4 * beta) * math.log(1 / eps)


def block_bound(eigenvalues, k, beta, d0, t) -> float:
    """Distance bound for the top-k space after ``t`` block momentum steps."""
    lam = np.asarray(eigenvalues, dtype=float)
    lk, lnext = lam[k - 1], lam[k]
    if lk * lk < 4 * beta:
        raise ValueError("need 2 sqrt(beta) <= lambda_k")
    pre = d0 / math.sqrt(1 - d0 * d0)
    grow_k = lk + math.sqrt(lk * lk - 4 * beta)
    # p_t(lam_k) >= r_+(lam_k)^t / 2 while |p_t(x)| <= r_+(x)^t, so the
    # factor 2 is needed on both branches
    if lnext < 2 * math.sqrt(beta):
        return pre * 2 * (2 * math.sqrt(beta) / grow_k) ** t
    return pre * 2 * ((lnext + math.sqrt(lnext * lnext - 4 * beta)) / grow_k) ** t


def iterations_to(trace: ConvergenceTrace, threshold: float):
    """First iteration index whose sin^2 error is at or below ``threshold``."""
    for it, s2 in zip(trace.iter, trace.sin2_error):
        if s2 <= threshold:
            return it
    return None

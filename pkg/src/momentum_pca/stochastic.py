"""Stochastic solvers: Oja with momentum, mini-batch and variance-reduced power+momentum.

All solvers consume an oracle from :mod:`momentum_pca.oracles` and follow
the same conventions:

* ``w_{-1} = 0`` and ``w_0`` is a seeded unit Gaussian vector, resampled
  until ``|u1^T w_0|`` reaches ``min_overlap`` when the truth is known.
* The pair ``(w_t, w_{t-1})`` is jointly divided by ``||w_{t+1}||`` after
  every step.
* The batch at iteration t of replicate r comes from the Philox stream
  keyed by ``(seed, r, 1, t)``, so runs are bit-identical for a given seed
  in single-threaded mode and thread-count invariant up to summation order.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .oracles import INIT_STREAM, STEP_STREAM, NoiseStats, substream, worker_threads
from .spectral import sin2_error
from .trace import ConvergenceTrace, SolverReport

__all__ = [
    "StochasticRunConfig",
    "VRPlan",
    "initial_vector",
    "oja_iterate",
    "minibatch_momentum_iterate",
    "vr_momentum_iterate",
    "epoch_ratios",
    "run_replicates",
    "plan_minibatch",
    "plan_vr",
    "median_plateau",
]

log = logging.getLogger(__name__)

ANCHOR_TOL = 1e-8


@dataclass(frozen=True)
class StochasticRunConfig:
    """Parameters shared by the stochastic solvers.

    ``epochs`` is only read by the VR solver and ``step_size`` only by Oja.
    ``threads`` is the worker count for batch reduction and replicates;
    ``None`` reads ``MPCA_THREADS`` and 0 means single-threaded.
    """

    beta: float = 0.0
    batch_size: int = 1
    iterations: int = 100
    epochs: int = 1
    step_size: float | None = None
    seed: int = 0
    replicates: int = 1
    threads: int | None = None

    def __post_init__(self):
        for name in ("batch_size", "iterations", "epochs", "replicates"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val}")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def workers(self) -> int:
        return worker_threads() if self.threads is None else self.threads


def initial_vector(dim, seed, replicate=0, u1=None, min_overlap=0.5, max_tries=10_000):
    """Seeded unit Gaussian start vector, resampled until ``|u1^T w| >= min_overlap``."""
    rng = substream(seed, replicate, INIT_STREAM)
    for _ in range(max_tries):
        w = rng.standard_normal(dim)
        w /= np.linalg.norm(w)
        if u1 is None or abs(float(u1 @ w)) >= min_overlap:
            return w
    raise RuntimeError(f"no start vector with overlap >= {min_overlap} in {max_tries} draws")


def _setup(oracle, cfg, u1, w0, replicate, min_overlap=0.5):
    A = oracle.mean
    if u1 is None:
        u1 = A.top_eigenvector
    if w0 is None:
        w0 = initial_vector(oracle.dim, cfg.seed, replicate, u1, min_overlap)
    else:
        w0 = np.asarray(w0, dtype=float)
        w0 = w0 / np.linalg.norm(w0)
    return A, np.asarray(u1, dtype=float), w0


def _step_rng(cfg, replicate, t):
    return substream(cfg.seed, replicate, STEP_STREAM, t)


def _joint_normalize(nxt, cur):
    scale = np.linalg.norm(nxt)
    if scale == 0 or not np.isfinite(scale):
        raise ArithmeticError(f"iterate norm became {scale}")
    return nxt / scale, cur / scale


def _log_row(trace, A, u1, w, t, samples, epoch, replicate):
    trace.append(t, sin2_error(u1, w), float(w @ A.matvec(w)) / float(w @ w),
                 samples, epoch, replicate)


def oja_iterate(oracle, cfg: StochasticRunConfig, momentum=True, u1=None, w0=None,
                replicate=0):
    """Oja's rule ``w <- (I + eta A_t) w - beta w_prev`` with constant step.

    Each step uses a batch of ``cfg.batch_size`` samples (1 is the classic
    streaming update).  With ``momentum=False`` the beta term is dropped.
    """
    if cfg.step_size is None:
        raise ValueError("Oja needs a positive step_size")
    eta = cfg.step_size
    beta = cfg.beta if momentum else 0.0
    A, u1, w = _setup(oracle, cfg, u1, w0, replicate)
    prev = np.zeros_like(w)
    trace = ConvergenceTrace()
    s = cfg.batch_size
    for t in range(1, cfg.iterations + 1):
        draws = oracle.draw(_step_rng(cfg, replicate, t), s)
        nxt = w + eta * oracle.apply(draws, w, cfg.workers) - beta * prev
        w, prev = _joint_normalize(nxt, w)
        _log_row(trace, A, u1, w, t, t * s, 0, replicate)
    return SolverReport(w, trace, cfg.iterations * s)


def minibatch_momentum_iterate(oracle, cfg: StochasticRunConfig, u1=None, w0=None,
                               replicate=0):
    """Mini-batch power method with momentum.

    ``w_{t+1} = (1/s) sum_i A_{t,i} w_t - beta w_{t-1}`` with ``w_{-1} = 0``.
    """
    A, u1, w = _setup(oracle, cfg, u1, w0, replicate)
    prev = np.zeros_like(w)
    trace = ConvergenceTrace()
    s = cfg.batch_size
    for t in range(1, cfg.iterations + 1):
        draws = oracle.draw(_step_rng(cfg, replicate, t), s)
        nxt = oracle.apply(draws, w, cfg.workers) - cfg.beta * prev
        w, prev = _joint_normalize(nxt, w)
        _log_row(trace, A, u1, w, t, t * s, 0, replicate)
    return SolverReport(w, trace, cfg.iterations * s)


def vr_momentum_iterate(oracle, cfg: StochasticRunConfig, A_access=None, u1=None, w0=None,
                        replicate=0, variant="power", diagnose=False, min_overlap=None):
    """Variance-reduced power method with momentum.

    Each of ``cfg.epochs`` epochs computes the exact product ``v = A w_anchor``
    once, restarts the momentum pair at ``(w_anchor, 0)`` and runs
    ``cfg.iterations`` steps of

        alpha = w_t^T w_anchor
        w_{t+1} = (1/s) sum_i A_i (w_t - alpha w_anchor) + alpha v - beta w_{t-1}

    The new anchor is the last iterate, renormalized.  ``variant="shamir"``
    swaps in ``(1/s) sum_i A_i (w_t - w_anchor) + v`` for comparison only.

    ``A_access`` supplies the exact products (anything with ``matvec``); it
    defaults to the oracle's mean.  For a row sampler pass a
    CovarianceOperator to get the two-pass product without forming A.
    Samples consumed include ``oracle.full_pass_cost`` per anchor product.

    With ``diagnose=True`` the report's ``extras["perturbation"]`` lists, per
    step, the norm of the stochastic perturbation ``(B - A)(w_t - alpha
    w_anchor)`` together with ``||w_t - alpha w_anchor||``.
    """
    if variant not in ("power", "shamir"):
        raise ValueError(f"unknown VR variant {variant!r}")
    if min_overlap is None:
        # the contraction argument assumes sin^2 of the start is at most 1/2
        min_overlap = math.sqrt(0.5)
    A, u1, w = _setup(oracle, cfg, u1, w0, replicate, min_overlap)
    exact = A if A_access is None else A_access
    trace = ConvergenceTrace()
    s = cfg.batch_size
    samples = 0
    step = 0
    anchors = [w.copy()]
    perturb = [] if diagnose else None
    anchor = w
    for k in range(1, cfg.epochs + 1):
        anchor_norm = np.linalg.norm(anchor)
        if abs(anchor_norm - 1.0) > ANCHOR_TOL:
            log.warning("anchor norm %.17g deviates from 1 at epoch %d", anchor_norm, k)
        anchor = anchor / anchor_norm
        v = exact.matvec(anchor)
        samples += oracle.full_pass_cost
        w, prev = anchor.copy(), np.zeros_like(anchor)
        for _ in range(cfg.iterations):
            step += 1
            draws = oracle.draw(_step_rng(cfg, replicate, step), s)
            if variant == "power":
                if np.array_equal(w, anchor):
                    # exact zero residual instead of a rounding-level one
                    alpha, resid = 1.0, np.zeros_like(w)
                else:
                    alpha = float(w @ anchor)
                    resid = w - alpha * anchor
                nxt = oracle.apply(draws, resid, cfg.workers) + alpha * v - cfg.beta * prev
            else:
                resid = w - anchor
                nxt = oracle.apply(draws, resid, cfg.workers) + v - cfg.beta * prev
            if perturb is not None:
                dev = oracle.apply(draws, resid, 0) - A.matvec(resid)
                perturb.append((float(np.linalg.norm(dev)), float(np.linalg.norm(resid))))
            samples += s
            w, prev = _joint_normalize(nxt, w)
            _log_row(trace, A, u1, w, step, samples, k, replicate)
        anchor = w
        anchors.append(w / np.linalg.norm(w))
    extras = {"anchors": anchors}
    if perturb is not None:
        extras["perturbation"] = perturb
    return SolverReport(anchors[-1], trace, samples, extras=extras)


def epoch_ratios(report: SolverReport, u1) -> np.ndarray:
    """Per-epoch sin^2 contraction ``e(anchor_{k+1}) / e(anchor_k)``."""
    errs = np.array([sin2_error(u1, a) for a in report.extras["anchors"]])
    with np.errstate(divide="ignore", invalid="ignore"):
        return errs[1:] / errs[:-1]


def run_replicates(solver, oracle, cfg: StochasticRunConfig, **kwargs):
    """Run ``cfg.replicates`` independent replicates of ``solver``.

    Replicates run on a thread pool when ``cfg.workers > 1``; results are
    always returned in replicate order together with the concatenated trace.
    """
    def one(r):
        return solver(oracle, cfg, replicate=r, **kwargs)

    reps = range(cfg.replicates)
    workers = cfg.workers
    if workers > 1 and cfg.replicates > 1:
        # batch reduction stays sequential inside each replicate
        inner = replace(cfg, threads=0)

        def one_inner(r):
            return solver(oracle, inner, replicate=r, **kwargs)

        with ThreadPoolExecutor(max_workers=min(workers, cfg.replicates)) as pool:
            reports = list(pool.map(one_inner, reps))
    else:
        reports = [one(r) for r in reps]
    return reports, ConvergenceTrace.concat(r.trace for r in reports)


def median_plateau(reports, fraction=0.2) -> float:
    """Median over replicates of the mean sin^2 error over the last ``fraction`` of steps."""
    vals = []
    for rep in reports:
        err = rep.trace.column("sin2_error")
        tail = max(1, int(round(fraction * err.size)))
        vals.append(float(np.mean(err[-tail:])))
    return float(np.median(vals))


def _sigma2(noise):
    return float(noise.sigma2 if isinstance(noise, NoiseStats) else noise)


def _gap(lam1, beta):
    if not beta >= 0:
        raise ValueError("beta must be nonnegative")
    g = lam1 * lam1 - 4.0 * beta
    if g <= 0:
        raise ValueError(f"need 4 beta < lambda1^2, got beta={beta}, lambda1={lam1}")
    return g


def plan_minibatch(noise, lam1, beta, d, delta, eps):
    """Iterations and batch size for the mini-batch method.

    ``T = ceil(sqrt(beta / g) log(32 / (delta eps)))`` and
    ``s = ceil(256 sqrt(d) sigma^2 T / (g delta eps))`` with
    ``g = lam1^2 - 4 beta``; s is at least 1.
    """
    if not (0 < delta < 1 and 0 < eps < 1):
        raise ValueError("delta and eps must lie in (0, 1)")
    g = _gap(lam1, beta)
    T = max(1, math.ceil(math.sqrt(beta) / math.sqrt(g) * math.log(32.0 / (delta * eps))))
    s = math.ceil(256.0 * math.sqrt(d) * _sigma2(noise) * T / (g * delta * eps))
    return T, max(1, s)


@dataclass(frozen=True)
class VRPlan:
    iterations: int
    batch_size: int
    log_base: float = 9.0

    def epochs(self, eps: float) -> int:
        """Epochs needed to shrink the error by ``eps`` at a 1/9 contraction."""
        if not 0 < eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        return max(1, math.ceil(math.log(1.0 / eps) / math.log(self.log_base)))

    def __iter__(self):
        yield self.iterations
        yield self.batch_size
        yield self.epochs


def plan_vr(noise, lam1, beta, d, delta, c=1.0 / 16):
    """Epoch length and batch size for the variance-reduced method.

    ``T = ceil(sqrt(beta / g) log(1 / (c delta)))`` and
    ``s = ceil(32 sqrt(d) sqrt(beta) sigma^2 log(1 / (c delta)) / (c g delta))``.
    Neither depends on the target accuracy; ``VRPlan.epochs(eps)`` does.
    """
    if not 0 < c <= 1.0 / 16:
        raise ValueError("c must lie in (0, 1/16]")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    g = _gap(lam1, beta)
    L = math.log(1.0 / (c * delta))
    T = max(1, math.ceil(math.sqrt(beta) / math.sqrt(g) * L))
    s = math.ceil(32.0 * math.sqrt(d) * math.sqrt(beta) * _sigma2(noise) * L / (c * g * delta))
    return VRPlan(T, max(1, s))

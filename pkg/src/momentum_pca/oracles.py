"""Unbiased matrix sample streams and noise statistics.

Every oracle exposes the same small surface:

``draw(rng, s)``
    Generate the randomness for one mini-batch of ``s`` i.i.d. samples.
``apply(draws, v, threads=0)``
    Return ``(1/s) sum_i A_i v`` for the drawn batch.  With ``threads > 1``
    the batch is split into chunks whose partial sums are combined by a
    pairwise tree; the draws themselves never depend on the thread count.
``sample_matrix(rng)``
    One explicit sample ``A_i`` (small d only; used for noise estimation).
``mean``
    The exact expectation as a SymmetricMatrix.

Random streams are keyed by ``(seed, replicate, iteration)`` through
numpy's counter-based Philox generator, so the batch drawn at a given
iteration is the same no matter how the work is scheduled.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .spectral import Dataset, SymmetricMatrix, as_operator

__all__ = [
    "OracleExhausted",
    "RowSampler",
    "FiniteSetOracle",
    "AdditiveNoiseOracle",
    "NoiseStats",
    "estimate_noise",
    "substream",
    "worker_threads",
    "tree_sum",
    "zero_variance_oracle",
]

INIT_STREAM = 0
STEP_STREAM = 1


class OracleExhausted(RuntimeError):
    pass


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for the counter tuple ``key`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def worker_threads() -> int:
    """Thread cap from ``MPCA_THREADS``; 0 means single-threaded deterministic mode."""
    raw = os.environ.get("MPCA_THREADS", "0").strip() or "0"
    try:
        return max(0, int(raw))
    except ValueError:
        raise ValueError(f"MPCA_THREADS must be an integer, got {raw!r}") from None


def tree_sum(parts):
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to sum")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _chunked(fn, items, threads):
    """Apply ``fn`` to chunks of ``items`` and tree-sum the partial results."""
    n = len(items)
    nchunks = max(1, min(threads, n))
    bounds = np.linspace(0, n, nchunks + 1).astype(int)
    pieces = [items[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=nchunks) as pool:
        partial = list(pool.map(fn, pieces))
    return tree_sum(partial)


class RowSampler:
    """Draw a row ``x_i`` uniformly and act as ``v -> x_i (x_i^T v)``.

    Batches larger than ``multinomial_above`` (default: the row count) are
    drawn as multinomial row counts.  That is the exact distribution of
    ``s`` uniform draws with replacement, but costs ``O(n d)`` per step
    instead of ``O(s d)``.
    """

    def __init__(self, dataset: Dataset, multinomial_above: int | None = None):
        self.dataset = dataset
        self.multinomial_above = dataset.n if multinomial_above is None else multinomial_above

    @property
    def dim(self):
        return self.dataset.dim

    @property
    def full_pass_cost(self):
        return self.dataset.n

    @cached_property
    def mean(self) -> SymmetricMatrix:
        return self.dataset.covariance()

    def draw(self, rng, s):
        n = self.dataset.n
        if s > self.multinomial_above:
            return ("counts", rng.multinomial(s, np.full(n, 1.0 / n)), s)
        return ("index", rng.integers(0, n, size=s), s)

    def apply(self, draws, v, threads=0):
        kind, data, s = draws
        X = self.dataset.rows
        if kind == "counts":
            rows = np.flatnonzero(data)

            def part(idx):
                return X[idx].T @ (data[idx] * (X[idx] @ v))
        else:
            rows = data

            def part(idx):
                xs = X[idx]
                return xs.T @ (xs @ v)

        total = part(rows) if threads <= 1 else _chunked(part, rows, threads)
        return total / s

    def sample_matrix(self, rng):
        x = self.dataset.rows[rng.integers(0, self.dataset.n)]
        return np.outer(x, x)


class FiniteSetOracle:
    """Samples from an explicit list of matrices with given probabilities."""

    def __init__(self, matrices, probs=None, replace=True):
        mats = np.asarray(matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError("matrices must have shape (m, d, d)")
        m = mats.shape[0]
        p = np.full(m, 1.0 / m) if probs is None else np.asarray(probs, dtype=float)
        if p.shape != (m,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-12):
            raise ValueError("probabilities must be nonnegative and sum to 1")
        self.matrices = mats
        self.probs = p
        self.replace = replace
        self._remaining = None if replace else list(range(m))

    @property
    def dim(self):
        return self.matrices.shape[1]

    full_pass_cost = 0

    @cached_property
    def mean(self) -> SymmetricMatrix:
        return SymmetricMatrix(np.tensordot(self.probs, self.matrices, axes=1))

    def draw(self, rng, s):
        if self.replace:
            return ("index", rng.choice(len(self.probs), size=s, p=self.probs), s)
        if s > len(self._remaining):
            raise OracleExhausted(f"asked for {s} samples, {len(self._remaining)} left")
        pick = set(rng.choice(len(self._remaining), size=s, replace=False).tolist())
        idx = np.array([r for i, r in enumerate(self._remaining) if i in pick], dtype=int)
        self._remaining = [r for i, r in enumerate(self._remaining) if i not in pick]
        return ("index", idx, s)

    def apply(self, draws, v, threads=0):
        _, idx, s = draws
        mats = self.matrices

        def part(chunk):
            counts = np.bincount(chunk, minlength=len(mats)).astype(float)
            return np.tensordot(counts, mats, axes=1) @ v

        total = part(idx) if threads <= 1 else _chunked(part, idx, threads)
        return total / s

    def sample_matrix(self, rng):
        return self.matrices[rng.choice(len(self.probs), p=self.probs)].copy()


class AdditiveNoiseOracle:
    """``A + scale * N`` with symmetric zero-mean noise ``N``.

    ``gaussian`` noise is ``(Z + Z^T) / sqrt(2)`` with standard normal Z; the
    mean of a batch of s such samples is drawn directly with scale
    ``scale / sqrt(s)``, which is exact.  ``rademacher`` noise uses
    symmetric random sign matrices and averages the batch explicitly.
    """

    def __init__(self, A, scale, distribution="gaussian"):
        if distribution not in ("gaussian", "rademacher"):
            raise ValueError(f"unknown noise distribution {distribution!r}")
        self._A = as_operator(A)
        self.scale = float(scale)
        self.distribution = distribution

    @property
    def dim(self):
        return self._A.dim

    full_pass_cost = 0

    @property
    def mean(self):
        return self._A

    def _noise(self, rng, count):
        d = self.dim
        if self.distribution == "gaussian":
            z = rng.standard_normal((count, d, d))
            return (z + np.swapaxes(z, 1, 2)) / math.sqrt(2.0)
        upper = np.triu(rng.choice([-1.0, 1.0], size=(count, d, d)))
        return upper + np.triu(upper, 1).swapaxes(1, 2)

    def draw(self, rng, s):
        if self.scale == 0:
            return ("noise", None, s)
        if self.distribution == "gaussian":
            return ("noise", self._noise(rng, 1)[0] * (self.scale / math.sqrt(s)), s)
        return ("noise", self._noise(rng, s).mean(axis=0) * self.scale, s)

    def apply(self, draws, v, threads=0):
        _, noise, _ = draws
        out = self._A.matvec(v)
        return out if noise is None else out + noise @ v

    def sample_matrix(self, rng):
        base = self._A.entries
        if self.scale == 0:
            return base.copy()
        return base + self.scale * self._noise(rng, 1)[0]


def zero_variance_oracle(A) -> FiniteSetOracle:
    """Oracle that always emits ``A`` itself."""
    return FiniteSetOracle(as_operator(A).entries[None])


@dataclass(frozen=True)
class NoiseStats:
    """Monte-Carlo noise summary of an oracle.

    ``sigma2`` estimates ``E ||A_i - A||^2`` (spectral norm), ``r_bound`` the
    almost-sure bound ``max ||A_i||`` and ``sigma_op`` the operator norm of
    ``E[(A_i - A) kron (A_i - A)]``.  The ``*_stderr`` fields are standard
    errors of the corresponding means.
    """

    sigma2: float
    r_bound: float
    sigma_op: float
    sigma2_stderr: float = 0.0
    samples: int = 0


def estimate_noise(oracle, samples: int, seed: int = 0, kron_max_dim: int = 16) -> NoiseStats:
    """Estimate sigma^2, r and ||Sigma|| from ``samples`` explicit draws.

    ``||Sigma||`` is computed from the averaged Kronecker products when the
    dimension is at most ``kron_max_dim``; above that sigma^2 itself is
    reported, which is always an upper bound.
    """
    if samples < 100:
        raise ValueError("estimate_noise needs at least 100 samples")
    rng = substream(seed, 7)
    A = oracle.mean.entries
    d = A.shape[0]
    devs = np.empty((samples, d, d))
    norms = np.empty(samples)
    for i in range(samples):
        S = oracle.sample_matrix(rng)
        devs[i] = S - A
        norms[i] = np.linalg.norm(S, 2)
    dev_norms = np.abs(np.linalg.eigvalsh(0.5 * (devs + devs.swapaxes(1, 2)))).max(axis=1)
    sq = dev_norms**2
    sigma2 = float(sq.mean())
    stderr = float(sq.std(ddof=1) / math.sqrt(samples))
    r = max(float(norms.max()), float(np.linalg.norm(A, 2)))
    if d <= kron_max_dim:
        # (D kron D)[(i,k), (j,l)] = D_ij D_kl
        kron = np.einsum("sij,skl->ikjl", devs, devs).reshape(d * d, d * d) / samples
        # ||mean(D kron D)|| <= mean ||D||^2 holds exactly; the min only
        # absorbs rounding.
        sigma_op = min(float(np.linalg.norm(kron, 2)), sigma2)
    else:
        sigma_op = sigma2
    return NoiseStats(sigma2, r, sigma_op, stderr, samples)

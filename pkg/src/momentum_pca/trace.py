"""Per-iteration convergence records and their CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["TRACE_COLUMNS", "ConvergenceTrace", "SolverReport", "format_float"]

TRACE_COLUMNS = ("replicate", "iter", "epoch", "sin2_error", "rayleigh", "samples_consumed")


def format_float(x: float) -> str:
    # 17 significant digits round-trips every float64.
    return f"{x:.16e}"


@dataclass
class ConvergenceTrace:
    replicate: list = field(default_factory=list)
    iter: list = field(default_factory=list)
    epoch: list = field(default_factory=list)
    sin2_error: list = field(default_factory=list)
    rayleigh: list = field(default_factory=list)
    samples_consumed: list = field(default_factory=list)

    def append(self, iteration, sin2=float("nan"), rayleigh=float("nan"),
               samples=0, epoch=0, replicate=0):
        self.replicate.append(int(replicate))
        self.iter.append(int(iteration))
        self.epoch.append(int(epoch))
        self.sin2_error.append(float(sin2))
        self.rayleigh.append(float(rayleigh))
        self.samples_consumed.append(int(samples))

    def __len__(self):
        return len(self.iter)

    def column(self, name) -> np.ndarray:
        return np.asarray(getattr(self, name))

    def with_replicate(self, replicate: int) -> "ConvergenceTrace":
        out = ConvergenceTrace(**{c: list(getattr(self, c)) for c in TRACE_COLUMNS})
        out.replicate = [int(replicate)] * len(self)
        return out

    def extend(self, other: "ConvergenceTrace") -> None:
        for c in TRACE_COLUMNS:
            getattr(self, c).extend(getattr(other, c))

    @classmethod
    def concat(cls, traces) -> "ConvergenceTrace":
        out = cls()
        for tr in traces:
            out.extend(tr)
        return out

    def replicates(self):
        return sorted(set(self.replicate))

    def select(self, replicate) -> "ConvergenceTrace":
        keep = [i for i, r in enumerate(self.replicate) if r == replicate]
        return ConvergenceTrace(**{c: [getattr(self, c)[i] for i in keep] for c in TRACE_COLUMNS})

    def rows(self):
        return zip(*(getattr(self, c) for c in TRACE_COLUMNS))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for rep, it, ep, s2, rq, ns in self.rows():
                writer.writerow([rep, it, ep, format_float(s2), format_float(rq), ns])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected trace columns {header}")
            out = cls()
            for row in reader:
                out.append(int(row[1]), float(row[3]), float(row[4]),
                           int(row[5]), int(row[2]), int(row[0]))
        return out


@dataclass
class SolverReport:
    """Final estimate of a solver run plus its trace.

    ``matvec_count`` counts products with the d x d target matrix; a block
    step with k columns counts k.
    """

    estimate: np.ndarray
    trace: ConvergenceTrace
    matvec_count: int = 0
    history: list | None = None
    extras: dict = field(default_factory=dict)

"""Command-line entry point: data generation, solver runs and trace comparison.

Every subcommand accepts ``--config FILE`` with flat ``key = value`` lines
(keys are the long flag names, dashes or underscores); explicit flags win
over the file.  Exit codes: 2 for configuration errors, 3 for I/O errors,
4 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .deterministic import (
    RankCollapseError,
    block_momentum_iterate,
    power_iterate,
    power_momentum_iterate,
)
from .oracles import RowSampler
from .polynomials import legendre_basis
from .spectral import (
    CovarianceOperator,
    Dataset,
    SpectrumSpec,
    SymmetricMatrix,
    export_csv,
    generate_dataset,
    load_dataset,
    load_matrix,
    matrix_with_spectrum,
    random_orthonormal,
    save_dataset,
    save_matrix,
)
from .stochastic import (
    StochasticRunConfig,
    initial_vector,
    minibatch_momentum_iterate,
    oja_iterate,
    run_replicates,
    vr_momentum_iterate,
)
from .trace import ConvergenceTrace, format_float
from .tuning import TunerConfig, best_heavy_ball, inhomo_iterate
from .variance import covariance_report, two_point_model

__all__ = [
    "ALGORITHMS",
    "ConfigError",
    "ExperimentConfig",
    "parse_spectrum",
    "read_config",
    "run_experiment",
    "compare_runs",
    "main",
]

log = logging.getLogger(__name__)

ALGORITHMS = ("power", "power-m", "oja", "oja-m", "minibatch-m", "vr-m", "block", "inhomo", "tune")
STOCHASTIC = ("oja", "oja-m", "minibatch-m", "vr-m")
THRESHOLDS = (1e-2, 1e-4, 1e-6)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


def parse_spectrum(text: str) -> list:
    """Parse an eigenvalue list.

    Comma-separated items, each one of ``v`` (a value), ``v*k`` (k copies)
    or ``a:b:k`` (k equispaced values from a to b).  ``benchmark`` expands
    to the d = 10, gap 0.1 benchmark.
    """
    text = text.strip()
    if text == "benchmark":
        return [1.0] + [0.9] * 9
    out = []
    try:
        for item in text.split(","):
            item = item.strip()
            if "*" in item:
                v, k = item.split("*")
                out.extend([float(v)] * int(k))
            elif ":" in item:
                a, b, k = item.split(":")
                out.extend(np.linspace(float(a), float(b), int(k)).tolist())
            else:
                out.append(float(item))
    except ValueError:
        raise ConfigError(f"cannot parse spectrum {text!r}") from None
    return out


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


@dataclass
class ExperimentConfig:
    algorithm: str
    spec: str | None = None
    dataset: str | None = None
    n: int = 100_000
    beta: float | None = None
    batch_size: int = 1
    iters: int = 200
    epochs: int | None = None
    eta: float | None = None
    seed: int = 0
    replicates: int = 1
    out: str | None = None
    block_size: int = 2
    lambda_est: float | None = None
    rounds: int = 10

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if (self.spec is None) == (self.dataset is None):
            raise ConfigError("give exactly one of spec or dataset")
        if self.algorithm == "vr-m" and self.epochs is None:
            raise ConfigError("vr-m requires epochs")
        if self.algorithm in ("oja", "oja-m") and self.eta is None:
            raise ConfigError(f"{self.algorithm} requires eta")
        for name in ("n", "batch_size", "iters", "replicates", "block_size", "rounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.eta is not None and self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.beta is not None and self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        return self

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in kinds:
                raise ConfigError(f"unknown configuration key {key!r}")
            kind = str(kinds[key])
            try:
                if "int" in kind:
                    kw[key] = int(raw)
                elif "float" in kind:
                    kw[key] = float(raw)
                else:
                    kw[key] = str(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        if "algorithm" not in kw:
            raise ConfigError("missing algorithm")
        return cls(**kw).validate()


@dataclass
class Problem:
    A: SymmetricMatrix
    dataset: Dataset | None = None


def _load_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.dataset is not None:
        try:
            ds = load_dataset(cfg.dataset)
            return Problem(ds.covariance(), ds)
        except ValueError as exc:
            if "not a dataset file" not in str(exc):
                raise OSError(str(exc)) from exc
        try:
            return Problem(load_matrix(cfg.dataset))
        except ValueError as exc:
            raise OSError(str(exc)) from exc
    try:
        spec = SpectrumSpec(tuple(parse_spectrum(cfg.spec)), cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.algorithm in STOCHASTIC:
        try:
            ds = generate_dataset(spec, cfg.n)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return Problem(ds.covariance(), ds)
    return Problem(matrix_with_spectrum(spec.eigenvalues, cfg.seed))


def _tuned_beta(A, seed):
    return best_heavy_ball(A, TunerConfig(), seed).beta


def _solve(cfg: ExperimentConfig, prob: Problem):
    """Run every replicate; returns (trace, total samples or matvecs)."""
    alg, A = cfg.algorithm, prob.A
    if alg in STOCHASTIC:
        if prob.dataset is None:
            raise ConfigError(f"{alg} needs a dataset (a matrix file has no samples)")
        oracle = RowSampler(prob.dataset)
        beta = cfg.beta
        if beta is None and alg == "oja-m":
            shifted = SymmetricMatrix(np.eye(A.dim) + cfg.eta * A.entries)
            beta = _tuned_beta(shifted, cfg.seed)
        elif beta is None and alg != "oja":
            beta = _tuned_beta(A, cfg.seed)
        run = StochasticRunConfig(beta=beta or 0.0, batch_size=cfg.batch_size,
                                  iterations=cfg.iters, epochs=cfg.epochs or 1,
                                  step_size=cfg.eta, seed=cfg.seed, replicates=cfg.replicates)
        if alg in ("oja", "oja-m"):
            reports, trace = run_replicates(oja_iterate, oracle, run, momentum=(alg == "oja-m"))
        elif alg == "minibatch-m":
            reports, trace = run_replicates(minibatch_momentum_iterate, oracle, run)
        else:
            reports, trace = run_replicates(vr_momentum_iterate, oracle, run,
                                            A_access=CovarianceOperator(prob.dataset))
        return trace, sum(r.matvec_count for r in reports)

    traces, total = [], 0
    u1 = A.top_eigenvector
    for r in range(cfg.replicates):
        w0 = initial_vector(A.dim, cfg.seed, r, u1)
        if alg == "power":
            rep = power_iterate(A, w0, cfg.iters)
        elif alg == "power-m":
            beta = _tuned_beta(A, cfg.seed) if cfg.beta is None else cfg.beta
            rep = power_momentum_iterate(A, w0, beta, cfg.iters)
        elif alg == "block":
            k = cfg.block_size
            if k >= A.dim:
                raise ConfigError("block_size must be smaller than the dimension")
            beta = A.eigenvalues[k] ** 2 / 4 if cfg.beta is None else cfg.beta
            W0 = random_orthonormal(np.random.default_rng([cfg.seed, r]), A.dim, k)
            rep = block_momentum_iterate(A, W0, beta, cfg.iters, U=A.eigenvectors[:, :k])
        elif alg == "inhomo":
            lam = cfg.lambda_est
            rep = inhomo_iterate(A, legendre_basis(max(cfg.iters, 1)), w0, cfg.iters, lam)
        else:  # tune
            res = best_heavy_ball(A, TunerConfig(rounds=cfg.rounds), cfg.seed + r, w0)
            rep_trace = ConvergenceTrace()
            for i, rq in enumerate(res.rayleighs, 1):
                rep_trace.append(i, float("nan"), rq, i * res.matvec_count // cfg.rounds)
            traces.append(rep_trace.with_replicate(r))
            total += res.matvec_count
            continue
        traces.append(rep.trace.with_replicate(r))
        total += rep.matvec_count
    return ConvergenceTrace.concat(traces), total


def _final_median(trace: ConvergenceTrace, column="sin2_error") -> float:
    finals = []
    for r in trace.replicates():
        col = trace.select(r).column(column)
        if col.size:
            finals.append(col[-1])
    return float(np.median(finals)) if finals else float("nan")


def run_experiment(cfg: ExperimentConfig, out=None) -> tuple:
    """Run one experiment; returns ``(trace, summary line)`` and writes the CSV."""
    cfg.validate()
    prob = _load_problem(cfg)
    with np.errstate(over="raise", invalid="raise"):
        trace, total = _solve(cfg, prob)
    if cfg.out is not None:
        trace.to_csv(cfg.out)
    metric = "rayleigh" if cfg.algorithm == "tune" else "sin2_error"
    summary = (f"algorithm={cfg.algorithm} replicates={cfg.replicates} "
               f"final_median_{metric}={format_float(_final_median(trace, metric))} "
               f"samples={total}")
    return trace, summary


def _median_curve(trace: ConvergenceTrace):
    """Median sin^2 and samples per iteration across replicates."""
    by_iter = {}
    for rep, it, _, s2, _, ns in trace.rows():
        by_iter.setdefault(it, []).append((s2, ns))
    iters = sorted(by_iter)
    err = np.array([np.median([v[0] for v in by_iter[i]]) for i in iters])
    samples = np.array([np.median([v[1] for v in by_iter[i]]) for i in iters])
    return np.array(iters), err, samples


def _first_below(iters, values, err, thr):
    hit = np.flatnonzero(err <= thr)
    return float(values[hit[0]]) if hit.size else float("nan")


def _epoch_contraction(trace: ConvergenceTrace) -> float:
    ratios = []
    for r in trace.replicates():
        sub = trace.select(r)
        ends = {}
        for ep, s2 in zip(sub.epoch, sub.sin2_error):
            ends[ep] = s2
        errs = [ends[k] for k in sorted(ends) if k > 0]
        ratios.extend(b / a for a, b in zip(errs[:-1], errs[1:]) if a > 0)
    return float(np.median(ratios)) if ratios else float("nan")


def compare_runs(paths, out=None) -> list:
    """Iterations and samples to each threshold, with ratios against the first trace.

    ``iter_ratio_<thr>`` is the first trace's iteration count divided by
    this trace's, so values above 1 mean this run got there sooner.
    """
    if len(paths) < 2:
        raise ConfigError("compare needs at least two traces")
    rows = []
    base = None
    for path in paths:
        trace = ConvergenceTrace.from_csv(path)
        iters, err, samples = _median_curve(trace)
        row = {"trace": Path(path).stem}
        hits = []
        for thr in THRESHOLDS:
            it = _first_below(iters, iters, err, thr)
            row[f"iters_to_{thr:g}"] = it
            row[f"samples_to_{thr:g}"] = _first_below(iters, samples, err, thr)
            hits.append(it)
        if base is None:
            base = hits
        for thr, b, h in zip(THRESHOLDS, base, hits):
            row[f"iter_ratio_{thr:g}"] = b / h if h and not math.isnan(h) else float("nan")
        row["epoch_contraction_median"] = _epoch_contraction(trace)
        rows.append(row)
    if out is not None:
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (format_float(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
    return rows


def _variance_rows(args):
    eigs = parse_spectrum(args.spec)
    d = len(eigs)
    rng = np.random.default_rng(args.seed)
    if d == 1:
        A, E = np.array([[eigs[0]]]), np.array([[args.sigma]])
    else:
        A = matrix_with_spectrum(eigs, args.seed).entries
        E = rng.standard_normal((d, d))
        E = (E + E.T) / 2
        E *= args.sigma / np.linalg.norm(E, 2)
    model = two_point_model(A, E, args.beta)
    exhaustive = args.monte_carlo is None
    for t in range(1, args.t_max + 1):
        rep = covariance_report(model, t, exhaustive=exhaustive,
                                replicates=args.monte_carlo or 10_000, seed=args.seed)
        yield rep


def _add_problem_flags(p):
    p.add_argument("--spec", help="eigenvalues, e.g. '1,0.9*9' or 'benchmark'")
    p.add_argument("--dataset", help="dataset or matrix file")
    p.add_argument("--n", type=int, help="rows to generate (default 100000)")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentum-pca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset or matrix")
    g.add_argument("--spec", required=True)
    g.add_argument("--n", type=int, default=100_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--matrix", action="store_true", help="store the d x d matrix instead")
    g.add_argument("--csv", help="also export the rows as CSV")

    r = sub.add_parser("run", help="run a solver and write its trace")
    r.add_argument("--config")
    r.add_argument("--algorithm", choices=ALGORITHMS)
    _add_problem_flags(r)
    r.add_argument("--beta", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--iters", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--eta", type=float)
    r.add_argument("--replicates", type=int)
    r.add_argument("--block-size", type=int)
    r.add_argument("--lambda-est", type=float)
    r.add_argument("--rounds", type=int)
    r.add_argument("--out")
    r.add_argument("--sweep-batch", help="comma-separated batch sizes, one trace each")

    t = sub.add_parser("tune", help="best heavy ball tuning; CSV of beta per round")
    t.add_argument("--config")
    _add_problem_flags(t)
    t.add_argument("--rounds", type=int)
    t.add_argument("--out")

    i = sub.add_parser("inhomo", help="optimal-filter recurrence on a random-spectrum matrix")
    i.add_argument("--measure", default="legendre", choices=("legendre",))
    i.add_argument("--lambda-est", type=float, default=None)
    i.add_argument("--top", type=float, default=1.001)
    i.add_argument("--dim", type=int, default=500)
    i.add_argument("--iters", type=int, default=200)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")

    v = sub.add_parser("variance-check", help="covariance bounds against simulation")
    v.add_argument("--spec", default="1")
    v.add_argument("--sigma", type=float, default=0.1)
    v.add_argument("--beta", type=float, default=0.2025)
    v.add_argument("--t-max", type=int, default=8)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--monte-carlo", type=int, help="paths for Monte Carlo instead of exhaustive")
    v.add_argument("--out")

    c = sub.add_parser("compare", help="compare trace files")
    c.add_argument("traces", nargs="+")
    c.add_argument("--out")
    return parser


def _merged(args, keys) -> dict:
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


_RUN_KEYS = ("algorithm", "spec", "dataset", "n", "beta", "batch_size", "iters", "epochs",
             "eta", "seed", "replicates", "out", "block_size", "lambda_est", "rounds")


def _cmd_generate(args):
    try:
        spec = SpectrumSpec(tuple(parse_spectrum(args.spec)), args.seed)
        if args.matrix:
            save_matrix(matrix_with_spectrum(spec.eigenvalues, args.seed), args.out)
        else:
            ds = generate_dataset(spec, args.n)
            save_dataset(ds, args.out)
            if args.csv:
                export_csv(ds, args.csv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"wrote {args.out}")


def _cmd_run(args):
    values = _merged(args, _RUN_KEYS)
    sweep = args.sweep_batch or values.pop("sweep_batch", None)
    if sweep:
        sizes = [int(s) for s in str(sweep).split(",")]
        base = Path(values.get("out") or "trace.csv")
        for s in sizes:
            vals = dict(values, batch_size=s, out=str(base.with_name(f"{base.stem}_s{s}{base.suffix}")))
            _run_one(ExperimentConfig.from_mapping(vals))
        return
    _run_one(ExperimentConfig.from_mapping(values))


def _run_one(cfg):
    start = time.perf_counter()
    _, summary = run_experiment(cfg)
    print(summary)
    print(f"wall={time.perf_counter() - start:.3f}s", file=sys.stderr)


def _cmd_tune(args):
    values = _merged(args, ("spec", "dataset", "n", "seed", "rounds"))
    cfg = ExperimentConfig.from_mapping(dict(values, algorithm="tune"))
    A = _load_problem(cfg).A
    res = best_heavy_ball(A, TunerConfig(rounds=cfg.rounds), cfg.seed)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(("round", "beta", "rayleigh"))
        for k, (b, rq) in enumerate(zip(res.betas, res.rayleighs), 1):
            writer.writerow((k, format_float(b), format_float(rq)))
    finally:
        if args.out:
            fh.close()
    print(f"final_rayleigh={format_float(res.rayleigh)} beta={format_float(res.beta)}")


def _cmd_inhomo(args):
    if args.dim < 2 or args.iters < 1:
        raise ConfigError("dim must be at least 2 and iters positive")
    rng = np.random.default_rng(args.seed)
    rest = rng.uniform(-1.0, 1.0, args.dim - 1)
    A = SymmetricMatrix(np.diag(np.concatenate([[args.top], rest])))
    w0 = initial_vector(args.dim, args.seed)
    basis = legendre_basis(max(args.iters, 1))
    rep = inhomo_iterate(A, basis, w0, args.iters, args.lambda_est)
    mom = power_momentum_iterate(A, w0, np.max(np.abs(rest)) ** 2 / 4, args.iters)
    pw = power_iterate(A, w0, args.iters)
    if args.out:
        rep.trace.to_csv(args.out)
    for name, r in (("inhomo", rep), ("power-m", mom), ("power", pw)):
        print(f"{name} final_sin2={format_float(r.trace.sin2_error[-1])}")


def _cmd_variance(args):
    if args.t_max < 1:
        raise ConfigError("t-max must be positive")
    cols = ("t", "series_bound", "closed_bound", "small_noise_bound", "simulated", "stderr",
            "exact_scalar")
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rep in _variance_rows(args):
            small = "" if rep.small_noise_bound is None else format_float(rep.small_noise_bound)
            writer.writerow((rep.t, format_float(rep.series_bound), format_float(rep.closed_bound),
                             small, format_float(rep.simulated), format_float(rep.stderr),
                             int(rep.exact_scalar)))
    finally:
        if args.out:
            fh.close()


def _cmd_compare(args):
    rows = compare_runs(args.traces, args.out)
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (format_float(v) if isinstance(v, float) else v) for k, v in row.items()})


COMMANDS = {
    "generate-data": _cmd_generate,
    "run": _cmd_run,
    "tune": _cmd_tune,
    "inhomo": _cmd_inhomo,
    "variance-check": _cmd_variance,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, FloatingPointError, RankCollapseError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors come from user-supplied parameters
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0

"""Accelerated power iteration with momentum for principal component analysis."""

from .deterministic import (
    block_momentum_iterate,
    iteration_budget,
    power_iterate,
    power_momentum_iterate,
    momentum_sin2_bound,
)
from .oracles import AdditiveNoiseOracle, FiniteSetOracle, NoiseStats, RowSampler, estimate_noise
from .polynomials import (
    MomentumPolyParams,
    legendre_basis,
    momentum_poly_closed,
    momentum_poly_recur,
    momentum_propagator,
)
from .spectral import (
    Dataset,
    SpectrumSpec,
    SymmetricMatrix,
    generate_dataset,
    rayleigh_quotient,
    sin2_error,
    subspace_dist,
)
from .stochastic import (
    StochasticRunConfig,
    minibatch_momentum_iterate,
    oja_iterate,
    plan_minibatch,
    plan_vr,
    vr_momentum_iterate,
)
from .trace import ConvergenceTrace, SolverReport
from .tuning import TunerConfig, best_heavy_ball, inhomo_iterate, optimal_filter_loss
from .variance import (
    RecurrenceModel,
    covariance_closed_bound,
    covariance_series_bound,
    simulate_covariance,
    vr_covariance_bound,
)

__version__ = "0.1.0"

"""Stochastic solvers and their batch-size planners."""

import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentum_pca.deterministic import power_iterate, power_momentum_iterate
from momentum_pca.oracles import (
    AdditiveNoiseOracle,
    FiniteSetOracle,
    NoiseStats,
    RowSampler,
    estimate_noise,
    zero_variance_oracle,
)
from momentum_pca.spectral import CovarianceOperator, SymmetricMatrix, matrix_with_spectrum
from momentum_pca.stochastic import (
    StochasticRunConfig,
    epoch_ratios,
    initial_vector,
    median_plateau,
    minibatch_momentum_iterate,
    oja_iterate,
    plan_minibatch,
    plan_vr,
    run_replicates,
    vr_momentum_iterate,
)

LAM = [1.0, 0.9, 0.7, 0.4, 0.1]


def _dirs(history_a, history_b, tol):
    for x, y in zip(history_a, history_b):
        x, y = x / np.linalg.norm(x), y / np.linalg.norm(y)
        assert min(np.linalg.norm(x - y), np.linalg.norm(x + y)) <= tol


def _stats(sigma2):
    return NoiseStats(sigma2, 1.0, sigma2)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            StochasticRunConfig(batch_size=0)
        with pytest.raises(ValueError):
            StochasticRunConfig(beta=-0.1)
        with pytest.raises(ValueError):
            StochasticRunConfig(step_size=0.0)
        with pytest.raises(ValueError):
            StochasticRunConfig(replicates=0)

    def test_oja_needs_step(self):
        with pytest.raises(ValueError):
            oja_iterate(zero_variance_oracle(np.eye(2)), StochasticRunConfig())

    def test_initial_vector_overlap(self):
        u1 = np.eye(10)[0]
        for seed in range(20):
            w = initial_vector(10, seed, u1=u1)
            assert abs(w[0]) >= 0.5
            assert np.linalg.norm(w) == pytest.approx(1.0)


class TestZeroVariance:
    def setup_method(self):
        self.A = matrix_with_spectrum(LAM, seed=11)
        self.oracle = zero_variance_oracle(self.A)
        self.w0 = initial_vector(5, 3)

    def test_minibatch_is_deterministic_momentum(self):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=7, iterations=60)
        rep = minibatch_momentum_iterate(self.oracle, cfg, w0=self.w0)
        det = power_momentum_iterate(self.A, self.w0, 0.2025, 60, start="zero")
        np.testing.assert_allclose(rep.trace.sin2_error, det.trace.sin2_error, atol=1e-12)
        _dirs([rep.estimate], [det.estimate], 1e-12)

    def test_vr_single_epoch_is_deterministic(self):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=3, iterations=40, epochs=1)
        rep = vr_momentum_iterate(self.oracle, cfg, w0=self.w0)
        det = power_momentum_iterate(self.A, self.w0, 0.2025, 40, start="zero")
        np.testing.assert_allclose(rep.trace.sin2_error, det.trace.sin2_error, atol=1e-12)

    def test_vr_epochs_restart(self):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=3, iterations=10, epochs=3)
        rep = vr_momentum_iterate(self.oracle, cfg, w0=self.w0)
        w = self.w0
        for k in range(3):
            det = power_momentum_iterate(self.A, w, 0.2025, 10, start="zero")
            _dirs([rep.extras["anchors"][k + 1]], [det.estimate], 1e-12)
            w = det.estimate

    def test_oja_is_momentum_on_shifted(self):
        eta, beta = 0.5, (1 + 0.5 * 0.9) ** 2 / 4
        cfg = StochasticRunConfig(beta=beta, step_size=eta, iterations=50)
        rep = oja_iterate(self.oracle, cfg, w0=self.w0)
        shifted = SymmetricMatrix(np.eye(5) + eta * self.A.entries)
        det = power_momentum_iterate(shifted, self.w0, beta, 50, start="zero",
                                     u1=self.A.top_eigenvector)
        np.testing.assert_allclose(rep.trace.sin2_error, det.trace.sin2_error, atol=1e-12)

    def test_oja_without_momentum_is_power(self):
        cfg = StochasticRunConfig(beta=0.9, step_size=1.0, iterations=30)
        rep = oja_iterate(self.oracle, cfg, momentum=False, w0=self.w0)
        det = power_iterate(np.eye(5) + self.A.entries, self.w0, 30, u1=self.A.top_eigenvector)
        np.testing.assert_allclose(rep.trace.sin2_error, det.trace.sin2_error, atol=1e-12)

    def test_small_step_limit(self):
        oracle = AdditiveNoiseOracle(self.A, 0.5)
        stats = estimate_noise(oracle, 200)
        for eta in (1e-3, 1e-5, 1e-8):
            cfg = StochasticRunConfig(step_size=eta, iterations=1)
            w1 = oja_iterate(oracle, cfg, momentum=False, w0=self.w0).estimate
            # r_bound is a sample estimate, so allow the max observed norm a margin
            assert np.linalg.norm(w1 - self.w0) <= 2 * eta * stats.r_bound


class TestReproducibility:
    @pytest.mark.parametrize("solver", ["minibatch", "vr", "oja"])
    def test_bit_identical(self, gap_oracle, solver):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=50, iterations=20, epochs=2,
                                  step_size=0.5, seed=4, replicates=2, threads=0)
        fn = {"minibatch": minibatch_momentum_iterate, "vr": vr_momentum_iterate,
              "oja": oja_iterate}[solver]
        _, a = run_replicates(fn, gap_oracle, cfg)
        _, b = run_replicates(fn, gap_oracle, cfg)
        assert a.sin2_error == b.sin2_error and a.rayleigh == b.rayleigh

    def test_threads_agree(self, gap_oracle):
        base = StochasticRunConfig(beta=0.2025, batch_size=5000, iterations=15, replicates=3,
                                   threads=0)
        _, seq = run_replicates(minibatch_momentum_iterate, gap_oracle, base)
        _, par = run_replicates(minibatch_momentum_iterate, gap_oracle,
                                StochasticRunConfig(**{**base.__dict__, "threads": 4}))
        np.testing.assert_allclose(par.sin2_error, seq.sin2_error, atol=1e-10)
        assert par.replicate == seq.replicate

    def test_samples_consumed(self, gap_oracle):
        cfg = StochasticRunConfig(beta=0.2, batch_size=10, iterations=5, epochs=2)
        rep = vr_momentum_iterate(gap_oracle, cfg)
        n = gap_oracle.full_pass_cost
        assert rep.trace.samples_consumed[-1] == 2 * n + 2 * 5 * 10 == rep.matvec_count
        rep = minibatch_momentum_iterate(gap_oracle, cfg)
        assert rep.trace.samples_consumed == [10 * t for t in range(1, 6)]


class TestVR:
    def test_anchor_vanishing(self, gap_oracle):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=20, iterations=8, epochs=3)
        rep = vr_momentum_iterate(gap_oracle, cfg, diagnose=True)
        pert = np.array(rep.extras["perturbation"])
        # first step of each epoch starts at the anchor itself
        assert np.all(pert[::8] == 0.0)
        assert np.all(pert[:, 1] >= 0)

    def test_perturbation_bound(self):
        A, E = np.diag([1.0, 0.5, 0.2]), np.array([[0, 0.2, 0], [0.2, 0, 0.1], [0, 0.1, 0]])
        oracle = FiniteSetOracle([A + E, A - E])
        cfg = StochasticRunConfig(beta=0.05, batch_size=1, iterations=6, epochs=2)
        rep = vr_momentum_iterate(oracle, cfg, diagnose=True)
        for dev, resid in rep.extras["perturbation"]:
            assert dev <= np.linalg.norm(E, 2) * resid + 1e-15

    def test_anchor_norm_warning(self, caplog):
        A = matrix_with_spectrum(LAM, seed=1)
        cfg = StochasticRunConfig(beta=0.2, iterations=3)
        with caplog.at_level(logging.WARNING):
            vr_momentum_iterate(zero_variance_oracle(A), cfg, w0=np.ones(5))
        assert caplog.text == ""

    def test_two_pass_exact_product(self, gap_dataset, gap_oracle):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=10, iterations=5, epochs=2)
        a = vr_momentum_iterate(gap_oracle, cfg)
        b = vr_momentum_iterate(gap_oracle, cfg, A_access=CovarianceOperator(gap_dataset))
        np.testing.assert_allclose(a.trace.sin2_error, b.trace.sin2_error, rtol=1e-8, atol=1e-14)

    def test_shamir_variant_runs(self, gap_oracle):
        cfg = StochasticRunConfig(beta=0.2025, batch_size=1000, iterations=8, epochs=2)
        rep = vr_momentum_iterate(gap_oracle, cfg, variant="shamir")
        assert np.all(np.isfinite(rep.trace.sin2_error))
        with pytest.raises(ValueError):
            vr_momentum_iterate(gap_oracle, cfg, variant="other")

    def test_epoch_ratios(self):
        A = matrix_with_spectrum(LAM, seed=2)
        cfg = StochasticRunConfig(beta=0.2025, iterations=10, epochs=3)
        rep = vr_momentum_iterate(zero_variance_oracle(A), cfg)
        ratios = epoch_ratios(rep, A.top_eigenvector)
        assert ratios.shape == (3,) and np.all(ratios < 1)


class TestPlanners:
    # frozen from a 40-digit independent evaluation
    @pytest.mark.parametrize("args, expected", [
        ((1.0, 0.2025, 10, 0.1, 0.01, 1.0), (11, 46868284)),
        ((1.0, 0.16, 20, 0.05, 0.001, 0.5), (9, 286216702)),
        ((0.9, 0.1, 5, 0.2, 0.1, 2.5), (4, 698090)),
    ])
    def test_minibatch_frozen(self, args, expected):
        lam1, beta, d, delta, eps, s2 = args
        assert plan_minibatch(_stats(s2), lam1, beta, d, delta, eps) == expected

    @pytest.mark.parametrize("args, expected", [
        ((1.0, 0.2025, 10, 0.01, 1 / 16, 1.0), (8, 2829133)),
        ((1.0, 0.16, 20, 0.05, 0.05, 0.5), (4, 190540)),
        ((0.9, 0.1, 5, 0.2, 0.01, 2.5), (4, 428722)),
    ])
    def test_vr_frozen(self, args, expected):
        lam1, beta, d, delta, c, s2 = args
        plan = plan_vr(_stats(s2), lam1, beta, d, delta, c)
        assert (plan.iterations, plan.batch_size) == expected

    def test_zero_variance_clamps(self):
        assert plan_minibatch(0.0, 1.0, 0.2025, 10, 0.1, 0.01)[1] == 1
        assert plan_vr(0.0, 1.0, 0.2025, 10, 0.01).batch_size == 1

    def test_divergence_toward_knee(self):
        prev = (0, 0)
        for beta in (0.2, 0.24, 0.249, 0.2499, 0.249999):
            T, s = plan_minibatch(1.0, 1.0, beta, 10, 0.1, 0.01)
            assert T >= prev[0] and s > prev[1]
            prev = (T, s)
        assert prev[0] > 1000

    def test_rejections(self):
        with pytest.raises(ValueError):
            plan_minibatch(1.0, 1.0, 0.25, 10, 0.1, 0.01)
        with pytest.raises(ValueError):
            plan_vr(1.0, 1.0, 0.2, 10, 0.01, c=0.1)
        with pytest.raises(ValueError):
            plan_vr(1.0, 1.0, 0.2, 10, 0.01, c=0.0)
        with pytest.raises(ValueError):
            plan_minibatch(1.0, 1.0, 0.2, 10, 1.0, 0.01)

    @settings(max_examples=50, deadline=None)
    @given(s2=st.floats(0.0, 100.0), beta=st.floats(0.0, 0.24), delta=st.floats(1e-3, 0.5),
           eps=st.floats(1e-10, 0.5), c=st.floats(1e-4, 1 / 16))
    def test_vr_eps_independent(self, s2, beta, delta, eps, c):
        plan = plan_vr(s2, 1.0, beta, 10, delta, c)
        again = plan_vr(s2, 1.0, beta, 10, delta, c)
        assert again.batch_size == plan.batch_size
        assert 0 <= plan.epochs(eps / 2) - plan.epochs(eps) <= 1
        T, s, epochs = plan
        assert epochs(eps) == plan.epochs(eps)

    def test_epoch_count(self):
        assert plan_vr(1.0, 1.0, 0.2025, 10, 0.01).epochs(1e-8) == math.ceil(8 * math.log(10) / math.log(9))


class TestStatistical:
    def test_minibatch_planner_success(self, gap_oracle):
        noise = estimate_noise(gap_oracle, 2000)
        T, s = plan_minibatch(noise, 1.0, 0.2025, 10, 0.1, 0.01)
        cfg = StochasticRunConfig(beta=0.2025, batch_size=s, iterations=T, replicates=20)
        reports, _ = run_replicates(minibatch_momentum_iterate, gap_oracle, cfg)
        wins = sum(r.trace.sin2_error[-1] <= 0.01 for r in reports)
        assert wins >= 16

    def test_oja_momentum_noise_ball(self, gap_oracle):
        eta, T = 1.0, 400
        on_cfg = StochasticRunConfig(beta=(1 + eta * 0.9) ** 2 / 4, step_size=eta,
                                     batch_size=1000, iterations=T, replicates=10)
        off_cfg = StochasticRunConfig(step_size=eta, batch_size=1000, iterations=T, replicates=10)
        on, _ = run_replicates(oja_iterate, gap_oracle, on_cfg)
        off, _ = run_replicates(oja_iterate, gap_oracle, off_cfg, momentum=False)
        p_on, p_off = median_plateau(on), median_plateau(off)
        assert p_on > p_off
        level = 2 * p_on
        first = [int(np.argmax(np.median([r.trace.sin2_error for r in reps], axis=0) <= level))
                 for reps in (on, off)]
        assert first[0] < first[1]

    def test_vr_contraction_small(self, gap_oracle):
        # larger than planned batch is not needed to see contraction on average
        cfg = StochasticRunConfig(beta=0.2025, batch_size=200_000, iterations=8, epochs=4,
                                  replicates=3)
        reports, _ = run_replicates(vr_momentum_iterate, gap_oracle, cfg)
        u1 = gap_oracle.mean.top_eigenvector
        ratios = np.concatenate([epoch_ratios(r, u1) for r in reports])
        assert np.median(ratios) <= 1 / 3

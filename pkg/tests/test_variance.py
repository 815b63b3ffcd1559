"""Covariance of the random momentum recurrence: series, closed form, simulation."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentum_pca.polynomials import MomentumPolyParams, momentum_propagator
from momentum_pca.variance import (
    BudgetExceededError,
    RecurrenceModel,
    composition_count,
    covariance_closed_bound,
    covariance_report,
    covariance_series_bound,
    denominator_check,
    numerator_check,
    simulate_covariance,
    two_point_model,
    vr_covariance_bound,
)


def _scalar_var_bruteforce(a, sigma, beta, t):
    """Var(F_t) for the scalar two-point law by explicit path enumeration."""
    vals, probs = [], []
    for path in itertools.product((a + sigma, a - sigma), repeat=t):
        f, fp = 1.0, 0.0
        for x in path:
            f, fp = x * f - beta * fp, f
        vals.append(f)
        probs.append(0.5**t)
    vals, probs = np.array(vals), np.array(probs)
    mean = probs @ vals
    return float(probs @ (vals - mean) ** 2)


def _random_law(d, seed, scale=0.15):
    rng = np.random.default_rng(seed)
    Q = np.linalg.qr(rng.standard_normal((d, d)))[0]
    lam = np.sort(rng.uniform(0.2, 0.9, d))[::-1]
    lam[0] = 1.0
    A = Q @ np.diag(lam) @ Q.T
    E = rng.standard_normal((d, d))
    E = scale * (E + E.T) / 2
    beta = rng.uniform(0.05, 0.24)
    return A, E, beta


class TestModel:
    def test_unbiasedness_enforced(self):
        with pytest.raises(ValueError):
            RecurrenceModel(np.eye(2), [(np.eye(2), 0.5), (2 * np.eye(2), 0.5)], 0.1)
        with pytest.raises(ValueError):
            RecurrenceModel(np.eye(2), [(np.eye(2), 0.6), (np.eye(2), 0.6)], 0.1)
        with pytest.raises(ValueError):
            two_point_model(np.eye(2), np.zeros((2, 2)), -0.1)

    def test_sigma_norm_two_point(self):
        A, E, beta = _random_law(3, 1)
        model = two_point_model(A, E, beta)
        assert model.sigma_norm() == pytest.approx(np.linalg.norm(E, 2) ** 2, rel=1e-12)

    def test_anchored_step_matrices(self):
        A, E, beta = _random_law(2, 2)
        w = np.array([0.6, 0.8])
        model = two_point_model(A, E, beta, vr_anchor=w)
        for S in model.step_matrices():
            np.testing.assert_allclose(S @ w, A @ w, atol=1e-14)


class TestSeries:
    def test_degree_one(self):
        model = two_point_model([[1.0]], [[0.1]], 0.2025)
        assert covariance_series_bound(model, 0.37, 1) == pytest.approx(0.37, rel=1e-15)

    def test_degree_two_frozen(self):
        model = two_point_model([[1.0]], [[0.1]], 0.2025)
        # 0.01 * 2 * beta * U_1(1/0.9)^2 + 0.01^2
        assert covariance_series_bound(model, 0.01, 2) == pytest.approx(0.0201, rel=1e-14)

    def test_composition_count(self):
        assert composition_count(1) == 1
        assert composition_count(10) == 2**10 - 1

    def test_budget(self):
        model = two_point_model([[1.0]], [[0.1]], 0.2)
        with pytest.raises(BudgetExceededError):
            covariance_series_bound(model, 0.01, 15)
        with pytest.raises(BudgetExceededError):
            simulate_covariance(model, 24)
        with pytest.raises(ValueError):
            covariance_series_bound(two_point_model([[0.5]], [[0.1]], 0.2), 0.01, 3)

    @pytest.mark.parametrize("a, sigma, beta", [
        (1.0, 0.1, 0.2025), (0.9, 0.3, 0.16), (1.0, 0.05, 0.25),
        (0.7, 0.2, 0.01), (-1.0, 0.1, 0.2), (2.0, 1.0, 0.5),
    ])
    def test_scalar_exact(self, a, sigma, beta):
        model = two_point_model([[a]], [[sigma]], beta)
        for t in range(1, 11):
            exact = _scalar_var_bruteforce(a, sigma, beta, t)
            sim, _ = simulate_covariance(model, t)
            series = covariance_series_bound(model, sigma**2, t)
            assert sim == pytest.approx(exact, rel=1e-12)
            assert sim == pytest.approx(series, rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), d=st.sampled_from([2, 3]), t=st.integers(1, 6))
    def test_matrix_upper_bound(self, seed, d, t):
        A, E, beta = _random_law(d, seed)
        model = two_point_model(A, E, beta)
        sim, _ = simulate_covariance(model, t)
        assert sim <= covariance_series_bound(model, model.sigma_norm(), t) * (1 + 1e-9)

    @settings(max_examples=60, deadline=None)
    @given(lam1=st.floats(0.5, 2.0), frac=st.floats(0.0, 0.999), sigma=st.floats(0.0, 0.5),
           t=st.integers(1, 12))
    def test_ordering(self, lam1, frac, sigma, t):
        beta = max(frac * lam1 * lam1 / 4, 1e-6)
        if lam1 * lam1 - 4 * beta <= 1e-9:
            return
        model = two_point_model([[lam1]], [[sigma]], beta)
        series = covariance_series_bound(model, sigma**2, t)
        general, small = covariance_closed_bound(lam1, beta, sigma**2, t)
        assert series <= general * (1 + 1e-10) + 1e-300
        if small is not None:
            assert series <= small * (1 + 1e-10) + 1e-300


class TestClosed:
    def test_zero_noise(self):
        assert covariance_closed_bound(1.0, 0.2, 0.0, 7) == (0.0, 0.0)

    def test_frozen(self):
        general, small = covariance_closed_bound(1.0, 0.2025, 0.001, 10)
        p10 = momentum_propagator(MomentumPolyParams(0.2025, 10), 1.0)
        assert p10 == pytest.approx(0.05992538492177734375, rel=1e-14)
        assert small == pytest.approx(0.0015120217928518650, rel=1e-12)
        assert general == pytest.approx(0.00084148230686814720, rel=1e-12)
        assert small == pytest.approx(p10**2 * 0.08 / 0.19, rel=1e-14)

    def test_small_noise_condition(self):
        _, small = covariance_closed_bound(1.0, 0.2025, 0.01, 10)
        assert small is None
        with pytest.raises(ValueError):
            covariance_closed_bound(1.0, 0.25, 0.01, 3)


class TestSimulation:
    def test_deterministic_law(self):
        A = np.diag([1.0, 0.5])
        model = RecurrenceModel(A, [(A, 1.0)], 0.1)
        assert simulate_covariance(model, 8) == (0.0, 0.0)

    def test_monte_carlo_consistent(self):
        A, E, beta = _random_law(2, 7, scale=0.3)
        model = two_point_model(A, E, beta)
        exact, _ = simulate_covariance(model, 5)
        mc, se = simulate_covariance(model, 5, exhaustive=False, replicates=40_000, seed=3)
        assert abs(mc - exact) <= 5 * se
        with pytest.raises(ValueError):
            simulate_covariance(model, 5, exhaustive=False, replicates=10)

    def test_threads_match(self):
        A, E, beta = _random_law(3, 8)
        model = two_point_model(A, E, beta)
        a, _ = simulate_covariance(model, 6)
        b, _ = simulate_covariance(model, 6, threads=2)
        assert b == pytest.approx(a, rel=1e-13)

    def test_report(self):
        model = two_point_model([[1.0]], [[0.1]], 0.2025)
        rep = covariance_report(model, 6)
        assert rep.exact_scalar
        assert rep.simulated == pytest.approx(rep.series_bound, rel=1e-10)
        assert rep.series_bound <= rep.closed_bound


class TestAnchored:
    def test_theta_linear(self):
        A, E, beta = _random_law(2, 3)
        model = two_point_model(A, E, beta)
        s = model.sigma_norm()
        ratio = vr_covariance_bound(model, s, 4, theta=0.5) / vr_covariance_bound(model, s, 4, theta=0.05)
        assert ratio == pytest.approx(10.0, rel=1e-14)

    def test_zero_angle(self):
        A, E, beta = _random_law(3, 4)
        u1 = np.linalg.eigh(A)[1][:, -1]
        model = two_point_model(A, E, beta, vr_anchor=u1)
        assert model.theta() == pytest.approx(0.0, abs=1e-14)
        assert vr_covariance_bound(model, model.sigma_norm(), 5) == pytest.approx(0.0, abs=1e-13)
        sim, _ = simulate_covariance(model, 5)
        assert sim <= 1e-13

    def test_angle_example(self):
        A, E, beta = _random_law(2, 5)
        U = np.linalg.eigh(A)[1][:, ::-1]
        phi = math.asin(math.sqrt(0.2))
        w0 = math.cos(phi) * U[:, 0] + math.sin(phi) * U[:, 1]
        model = two_point_model(A, E, beta, vr_anchor=w0)
        assert model.theta() == pytest.approx(0.2, rel=1e-12)
        sim, _ = simulate_covariance(model, 4)
        assert sim <= vr_covariance_bound(model, model.sigma_norm(), 4)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), d=st.sampled_from([2, 3]), t=st.integers(1, 6))
    def test_anchored_bound(self, seed, d, t):
        A, E, beta = _random_law(d, seed)
        w0 = np.random.default_rng(seed + 1).standard_normal(d)
        model = two_point_model(A, E, beta, vr_anchor=w0)
        sim, _ = simulate_covariance(model, t)
        assert sim <= vr_covariance_bound(model, model.sigma_norm(), t) * (1 + 1e-9)


class TestMomentChecks:
    @pytest.mark.parametrize("seed", range(5))
    def test_denominator_and_numerator(self, seed):
        A, E, beta = _random_law(3, seed, scale=0.03)
        model = two_point_model(A, E, beta)
        u = np.linalg.eigh(A)[1]
        w0 = u[:, -1] + 0.5 * u[:, 0]
        w0 /= np.linalg.norm(w0)
        for t in (2, 4, 6):
            var, bound = denominator_check(model, w0, t)
            if bound is not None:
                assert var <= bound
            lhs, nbound = numerator_check(model, w0, t)
            assert lhs <= nbound

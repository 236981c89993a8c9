"""Tests for the RK4 moment integrator, telegraph simulation and Poisson click oracle."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

from neuron_models import SELECTED_TSP_VARIANT, TspParams, TspVariant, tsp_occupation, tsp_probability
from physics_oracles import (
    TelegraphConfig,
    fermi_occupation,
    fsme_final_occupation,
    fsme_integrate,
    poisson_click_rate,
    rk4_convergence_slope,
    select_tsp_variant,
    telegraph_simulate,
    tunnel_rates,
)
from psn_exceptions import DomainError

PARAMS = TspParams.reference()


class TestFsme:

    def test_zero_coupling_never_populates(self):
        trajectory = fsme_integrate(PARAMS, 0.0, 1e-3)
        assert np.all(trajectory.occupation == 0.0)
        assert trajectory.final_occupation == 0.0

    def test_ends_exactly_at_evolution_time(self):
        trajectory = fsme_integrate(PARAMS, 3.0, 7e-4)
        assert trajectory.times[-1] == pytest.approx(PARAMS.t, abs=1e-15)
        assert trajectory.final_state.time == PARAMS.t

    def test_occupation_bounded(self):
        for alpha in (1.0, 7.5, 25.0, 50.0):
            occupation = fsme_integrate(PARAMS, alpha, 1e-4).occupation
            assert np.all(occupation >= 0.0)
            assert np.all(occupation <= 1.0 + 1e-6)

    def test_step_larger_than_hundredth_rejected(self):
        with pytest.raises(DomainError):
            fsme_integrate(PARAMS, 1.0, PARAMS.t / 50)
        with pytest.raises(DomainError):
            fsme_integrate(PARAMS, 1.0, 0.0)

    def test_vectorized_matches_scalar(self):
        alphas = [0.5, 10.0, 40.0]
        batch = fsme_final_occupation(PARAMS, alphas, 1e-4)
        single = [fsme_integrate(PARAMS, a, 1e-4).final_occupation for a in alphas]
        assert_allclose(batch, single, rtol=1e-13, atol=1e-16)

    def test_closed_form_matches_oracle(self):
        alphas = np.linspace(-50.0, 50.0, 41)
        oracle = fsme_final_occupation(PARAMS, alphas, 1e-5)
        assert np.max(np.abs(tsp_probability(PARAMS, alphas) - oracle)) < 1e-6

    def test_closed_form_matches_oracle_at_other_parameters(self):
        params = TspParams(t=0.5, gamma=0.1, kappa=12.0, zeta=4.0)
        alphas = np.array([0.3, 2.0, 2.97, 5.0, 15.0])
        oracle = fsme_final_occupation(params, alphas, 1e-5)
        assert np.max(np.abs(tsp_occupation(params, alphas).real - oracle)) < 1e-6

    def test_rk4_is_fourth_order(self):
        slope = rk4_convergence_slope(PARAMS, 50.0)
        assert abs(slope - 4.0) <= 0.3


def test_variant_selection_picks_decaying_exponent():
    best, deviations = select_tsp_variant(PARAMS, np.linspace(-50.0, 50.0, 21))
    assert best is TspVariant.DECAYING
    assert best is SELECTED_TSP_VARIANT
    assert deviations[TspVariant.DECAYING] < 1e-6
    assert deviations[TspVariant.GROWING] > 1e-3


class TestTelegraph:

    def test_fermi_and_rates(self):
        assert fermi_occupation(0.0) == 0.5
        config = TelegraphConfig(gamma_S=0.5, gamma_D=1.5, epsilon_over_kT=1.0)
        rate_in, rate_out = tunnel_rates(config)
        assert_allclose(rate_in + rate_out, 2.0)
        # Steady state Gamma_in / (Gamma_in + Gamma_out) is the sigmoid
        assert_allclose(rate_in / (rate_in + rate_out), expit(1.0))

    @pytest.mark.parametrize("eps", [-5.0, -1.0, 0.0, 2.0, 5.0])
    def test_occupation_fraction_matches_sigmoid(self, eps):
        rng = np.random.default_rng([11, int(eps * 10) + 100])
        fraction = telegraph_simulate(TelegraphConfig(epsilon_over_kT=eps), rng)
        assert abs(fraction - expit(eps)) < 0.01

    def test_default_burn_in_is_ten_relaxation_times(self):
        assert TelegraphConfig(gamma_S=2.0, gamma_D=3.0).burn_in == pytest.approx(2.0)

    def test_invalid_config(self):
        with pytest.raises(DomainError):
            TelegraphConfig(gamma_S=0.0)
        with pytest.raises(DomainError):
            TelegraphConfig(horizon=1.0, burn_in=2.0)

    def test_error_shrinks_as_inverse_square_root_of_time(self):
        def rms_error(horizon):
            errors = [telegraph_simulate(TelegraphConfig(horizon=horizon), np.random.default_rng([seed, int(horizon)]))
                      - 0.5 for seed in range(20)]
            return np.sqrt(np.mean(np.square(errors)))

        # Four times the observation window halves the error on average
        ratio = rms_error(500.0) / rms_error(2000.0)
        assert 1.0 <= ratio <= 4.0

    def test_deep_level_is_always_occupied(self):
        fraction = telegraph_simulate(TelegraphConfig(epsilon_over_kT=50.0), np.random.default_rng(0))
        assert abs(fraction - 1.0) < 1e-3

    def test_same_seed_same_trajectory(self):
        config = TelegraphConfig(horizon=500.0)
        a = telegraph_simulate(config, np.random.default_rng(3))
        b = telegraph_simulate(config, np.random.default_rng(3))
        assert a == b


class TestPoisson:

    def test_zero_intensity_never_clicks(self):
        assert poisson_click_rate(0.0, 1000, np.random.default_rng(0)) == 0.0

    @pytest.mark.parametrize("lam", [0.1, 0.7, 2.0])
    def test_click_rate_within_four_sigma(self, lam):
        trials = 1_000_000
        expected = 1.0 - np.exp(-lam)
        rate = poisson_click_rate(lam, trials, np.random.default_rng(5))
        assert abs(rate - expected) <= 4 * np.sqrt(expected * (1 - expected) / trials)

    def test_error_shrinks_with_trials(self):
        lam = 0.5
        expected = 1.0 - np.exp(-lam)

        def rms(trials):
            errors = [poisson_click_rate(lam, trials, np.random.default_rng(s)) - expected
                      for s in range(40)]
            return np.sqrt(np.mean(np.square(errors)))

        # Monte Carlo error scales as 1/sqrt(K): quadrupling K halves it
        ratio = rms(2000) / rms(8000)
        assert 1.0 < ratio < 4.0

    def test_invalid_arguments(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DomainError):
            poisson_click_rate(-0.1, 10, rng)
        with pytest.raises(DomainError):
            poisson_click_rate(float("inf"), 10, rng)
        with pytest.raises(DomainError):
            poisson_click_rate(1.0, 0, rng)

"""
Independent numerical validators for the closed-form neuron probabilities.

- fsme_integrate: fixed-step RK4 integration of the single-photon moment equations (TSP)
- telegraph_simulate: Gillespie simulation of a two-state quantum dot (SET)
- poisson_click_rate: Monte Carlo photon counting (SPD)
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from neuron_models import TspParams, TspVariant, tsp_occupation
from psn_exceptions import DomainError, PhysicsViolationError

logger = logging.getLogger(__name__)

# Occupation above 1 + this during integration is a physics violation
OCCUPATION_VIOLATION_TOLERANCE = 1e-6

# Exponential waiting times are drawn in blocks of this size
_EXPONENTIAL_BLOCK = 4096


@dataclass(frozen=True)
class MomentState:
    """Cross moments (w_a, w_b) of the cavity and mechanical modes at a given time."""
    wa: complex
    wb: complex
    time: float

    @property
    def occupation(self) -> float:
        """<b^dagger b> = |w_b|^2 by the single-excitation factorization."""
        return abs(self.wb) ** 2


@dataclass
class FsmeTrajectory:
    """Sampled output of fsme_integrate."""
    times: np.ndarray
    occupation: np.ndarray
    final_state: MomentState

    @property
    def final_occupation(self) -> float:
        return float(self.occupation[-1])


@dataclass
class TelegraphConfig:
    """Two-state dot coupled to source and drain leads."""
    gamma_S: float = 1.0
    gamma_D: float = 1.0
    epsilon_over_kT: float = 0.0
    horizon: float = 5e4
    burn_in: Optional[float] = None

    def __post_init__(self):
        if self.gamma_S <= 0 or self.gamma_D <= 0:
            raise DomainError("tunnel couplings gamma_S and gamma_D must be positive")
        if math.isnan(self.epsilon_over_kT):
            raise DomainError("epsilon_over_kT must not be NaN")
        if self.burn_in is None:
            # Ten relaxation times 1/Gamma
            self.burn_in = 10.0 / self.total_rate
        if self.burn_in < 0 or not self.horizon > self.burn_in:
            raise DomainError(
                f"need horizon > burn_in >= 0, got horizon={self.horizon} burn_in={self.burn_in}"
            )

    @property
    def total_rate(self) -> float:
        return self.gamma_S + self.gamma_D


def fermi_occupation(epsilon_over_kT: float) -> float:
    """Fermi-Dirac occupation n_F = 1 / (1 + exp(eps / k_B T))."""
    return float(expit(-epsilon_over_kT))


def tunnel_rates(config: TelegraphConfig) -> Tuple[float, float]:
    """Total (in, out) tunnelling rates Gamma (1 - n_F) and Gamma n_F."""
    n_f = fermi_occupation(config.epsilon_over_kT)
    gamma = config.total_rate
    return gamma * (1.0 - n_f), gamma * n_f


def _moment_derivative(time, wa, wb, alpha, params: TspParams):
    """Right-hand side of the affine moment equation driven by xi(t) = sqrt(zeta) exp(-zeta t / 2)."""
    drive = -math.sqrt(params.kappa) * math.sqrt(params.zeta) * math.exp(-params.zeta * time / 2.0)
    dwa = -0.5 * params.kappa * wa + 1j * alpha * wb + drive
    dwb = 1j * alpha * wa - 0.5 * params.gamma * wb
    return dwa, dwb


def _rk4_step(time, wa, wb, h, alpha, params: TspParams):
    """Classic fourth-order Runge-Kutta step; works on scalars and numpy arrays alike."""
    k1a, k1b = _moment_derivative(time, wa, wb, alpha, params)
    k2a, k2b = _moment_derivative(time + 0.5 * h, wa + 0.5 * h * k1a, wb + 0.5 * h * k1b, alpha, params)
    k3a, k3b = _moment_derivative(time + 0.5 * h, wa + 0.5 * h * k2a, wb + 0.5 * h * k2b, alpha, params)
    k4a, k4b = _moment_derivative(time + h, wa + h * k3a, wb + h * k3b, alpha, params)
    wa_next = wa + h * (k1a + 2.0 * k2a + 2.0 * k3a + k4a) / 6.0
    wb_next = wb + h * (k1b + 2.0 * k2b + 2.0 * k3b + k4b) / 6.0
    return wa_next, wb_next


def _step_count(params: TspParams, dt: float) -> int:
    if not dt > 0 or not math.isfinite(dt):
        raise DomainError(f"time step must be positive, got {dt}")
    if dt > params.t / 100.0 * (1.0 + 1e-12):
        raise DomainError(f"time step {dt} exceeds t/100 = {params.t / 100.0}")
    return max(1, int(math.ceil(params.t / dt - 1e-9)))


def _check_occupation(occupation, time: float) -> None:
    worst = float(np.max(occupation))
    if worst > 1.0 + OCCUPATION_VIOLATION_TOLERANCE:
        raise PhysicsViolationError(
            f"b-mode occupation {worst:.9f} exceeds 1 at t={time:.6g}"
        )


def fsme_integrate(params: TspParams, alpha: float, dt: float) -> FsmeTrajectory:
    """
    Integrate the moment equations from vacuum at t=0 to t=params.t with RK4.

    Args:
        params: Evolution time and decay rates
        alpha: Constant real coupling strength
        dt: Requested step (<= params.t / 100); the step actually used is
            params.t divided by the step count, so the end point is hit exactly

    Returns:
        FsmeTrajectory with |w_b|^2 at every step; its final occupation is the
        oracle value for the closed-form TSP probability.

    Raises:
        PhysicsViolationError: If |w_b|^2 exceeds 1 during integration
    """
    steps = _step_count(params, dt)
    h = params.t / steps
    alpha = float(alpha)

    wa, wb = 0j, 0j
    times = np.empty(steps + 1)
    occupation = np.empty(steps + 1)
    times[0] = 0.0
    occupation[0] = 0.0

    for n in range(steps):
        time = n * h
        wa, wb = _rk4_step(time, wa, wb, h, alpha, params)
        occ = wb.real * wb.real + wb.imag * wb.imag
        if occ > 1.0 + OCCUPATION_VIOLATION_TOLERANCE:
            _check_occupation(occ, time + h)
        times[n + 1] = (n + 1) * h
        occupation[n + 1] = occ

    logger.debug(f"FSME alpha={alpha} steps={steps} final occupation={occupation[-1]:.12f}")
    return FsmeTrajectory(times=times, occupation=occupation,
                          final_state=MomentState(wa=wa, wb=wb, time=params.t))


def fsme_final_occupation(params: TspParams, alphas: Sequence[float], dt: float) -> np.ndarray:
    """Final occupation for a whole grid of couplings, integrated side by side."""
    steps = _step_count(params, dt)
    h = params.t / steps
    alpha = np.asarray(alphas, dtype=float)

    wa = np.zeros(alpha.shape, dtype=complex)
    wb = np.zeros(alpha.shape, dtype=complex)
    for n in range(steps):
        wa, wb = _rk4_step(n * h, wa, wb, h, alpha, params)
        _check_occupation(np.abs(wb) ** 2, (n + 1) * h)
    return np.abs(wb) ** 2


def rk4_convergence_slope(params: TspParams, alpha: float,
                          dts: Sequence[float] = (1e-3, 5e-4, 2.5e-4),
                          reference_dt: float = 1e-6) -> float:
    """Least-squares slope of log(error) against log(dt) relative to a fine reference run."""
    reference = fsme_integrate(params, alpha, reference_dt).final_occupation
    errors = [abs(fsme_integrate(params, alpha, dt).final_occupation - reference) for dt in dts]
    logger.debug(f"RK4 errors for dt={list(dts)}: {errors}")
    slope, _ = np.polyfit(np.log(dts), np.log(errors), 1)
    return float(slope)


def select_tsp_variant(params: TspParams, alphas: Sequence[float],
                       dt: float = 1e-5) -> Tuple[TspVariant, Dict[TspVariant, float]]:
    """
    Compare both closed-form exponent conventions with the RK4 oracle.

    Returns:
        The variant with the smaller maximum deviation, and the maximum
        absolute deviation of each variant over the grid.
    """
    oracle = fsme_final_occupation(params, alphas, dt)
    deviations = {}
    for variant in TspVariant:
        with np.errstate(all='ignore'):
            analytic = tsp_occupation(params, np.asarray(alphas, dtype=float), variant)
            gap = np.abs(analytic - oracle)
        gap = np.where(np.isfinite(gap), gap, np.inf)
        deviations[variant] = float(np.max(gap))
        logger.info(f"TSP variant {variant.value}: max |analytic - oracle| = {deviations[variant]:.3e}")
    best = min(deviations, key=deviations.get)
    return best, deviations


def telegraph_simulate(config: TelegraphConfig, rng: np.random.Generator) -> float:
    """
    Gillespie simulation of the dot occupation as a random telegraph process.

    The dot starts empty; waiting times are exponential with rate Gamma_in
    when empty and Gamma_out when occupied.

    Returns:
        Fraction of [burn_in, horizon] spent occupied; its expectation is
        sigma(epsilon / k_B T).
    """
    rate_in, rate_out = tunnel_rates(config)
    horizon = config.horizon
    burn_in = config.burn_in

    time = 0.0
    state = 0
    occupied = 0.0
    waits = rng.standard_exponential(_EXPONENTIAL_BLOCK)
    cursor = 0

    while time < horizon:
        rate = rate_in if state == 0 else rate_out
        if cursor == _EXPONENTIAL_BLOCK:
            waits = rng.standard_exponential(_EXPONENTIAL_BLOCK)
            cursor = 0
        wait = waits[cursor] / rate if rate > 0 else math.inf
        cursor += 1

        next_time = min(time + wait, horizon)
        if state == 1 and next_time > burn_in:
            occupied += next_time - max(time, burn_in)
        time = next_time
        state ^= 1

    return occupied / (horizon - burn_in)


def poisson_click_rate(lam: float, trials: int, rng: np.random.Generator) -> float:
    """
    Fraction of `trials` Poisson(lam) photon counts that register a click (count >= 1).

    Raises:
        DomainError: If lam is negative or not finite, or trials < 1
    """
    if not math.isfinite(lam) or lam < 0:
        raise DomainError(f"Poisson intensity must be a finite non-negative number, got {lam}")
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    counts = rng.poisson(lam, size=trials)
    return float(np.count_nonzero(counts) / trials)

"""
Physical stochastic neuron models.

Closed-form activation probabilities p(z) for the single-photon detector (SPD),
single-electron transistor (SET) and true single-photon (TSP) neurons, their
derivatives, and Bernoulli sampling of empirical activations.
"""

import logging
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.special import expit

from psn_exceptions import (
    ConfigurationError,
    DomainError,
    InternalConsistencyError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Central difference step for the TSP derivative
TSP_DERIVATIVE_STEP = 1e-4

# Tolerances for the complex evaluation of the TSP occupation
TSP_IMAG_TOLERANCE = 1e-9
TSP_RANGE_TOLERANCE = 1e-9

# The occupation decays as 1/alpha^2 in strong coupling and is taken as zero past this
TSP_ASYMPTOTIC_COUPLING = 1e12

# Below this magnitude the removable singularities are evaluated by their limits
_SINGULAR_DENOMINATOR = 1e-10
_SINGULAR_DELTA = 1e-2

_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(40)


class NeuronKind(Enum):
    """Physical neuron families."""
    SPD = "SPD"
    SET = "SET"
    TSP = "TSP"


class TspVariant(Enum):
    """Sign of the second exponent in the closed-form TSP occupation."""
    DECAYING = "decaying"   # exp(-t(Delta+u)/4), follows from the moment ODE
    GROWING = "growing"     # exp(+t(Delta+u)/4)


# Hard-selected after comparison with the RK4 moment integrator
# (see physics_oracles.select_tsp_variant and experiment_runner.run_physics_validation)
SELECTED_TSP_VARIANT = TspVariant.DECAYING


@dataclass(frozen=True)
class TspParams:
    """Evolution time and decay rates of the two-mode single-photon neuron."""
    t: float = 0.21
    gamma: float = 0.02
    kappa: float = 30.0
    zeta: float = 10.7

    def __post_init__(self):
        values = (self.t, self.gamma, self.kappa, self.zeta)
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"TSP parameters must be finite: {self}")
        if self.t <= 0 or self.kappa <= 0 or self.zeta <= 0 or self.gamma < 0:
            raise DomainError(
                f"TSP parameters require t > 0, kappa > 0, zeta > 0, gamma >= 0; got {self}"
            )

    @classmethod
    def reference(cls) -> 'TspParams':
        """Reference operating point: t=0.21, gamma=0.02, kappa=30, zeta=10.7."""
        return cls(t=0.21, gamma=0.02, kappa=30.0, zeta=10.7)

    @property
    def u(self) -> float:
        return self.gamma + self.kappa - 2.0 * self.zeta

    def delta(self, alpha: ArrayLike) -> np.ndarray:
        """Complex square root of (gamma - kappa)^2 - 16 alpha^2."""
        alpha = np.asarray(alpha, dtype=float)
        radicand = (self.gamma - self.kappa) ** 2 - 16.0 * alpha ** 2
        return np.sqrt(radicand.astype(complex))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EmpiricalActivation:
    """Sample mean of K binary neuron outcomes."""
    mean: float
    trials: int

    def __post_init__(self):
        if not isinstance(self.trials, (int, np.integer)) or self.trials < 1:
            raise DomainError(f"trials must be a positive integer, got {self.trials}")
        if not 0.0 <= self.mean <= 1.0:
            raise DomainError(f"empirical mean {self.mean} outside [0, 1]")
        count = self.mean * self.trials
        if abs(count - round(count)) > 1e-9:
            raise DomainError(
                f"empirical mean {self.mean} is not a multiple of 1/{self.trials}"
            )

    @property
    def count(self) -> int:
        return int(round(self.mean * self.trials))


def _require_finite(z: ArrayLike) -> np.ndarray:
    arr = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError("pre-activation must be finite")
    return arr


def _as_output(value: np.ndarray, like: ArrayLike):
    """Return a Python float for scalar input, an array otherwise."""
    if np.ndim(like) == 0:
        return float(value)
    return value


def spd_probability(z: ArrayLike) -> ArrayLike:
    """
    Click probability 1 - exp(-z^2) of a photon detector under coherent encoding.

    The detected intensity is lambda = |z|^2 and the photon count is Poisson.
    """
    arr = _require_finite(z)
    return _as_output(-np.expm1(-arr ** 2), z)


def set_probability(z: ArrayLike) -> ArrayLike:
    """Steady-state dot occupation sigma(z) with k_B T folded into z."""
    arr = _require_finite(z)
    return _as_output(expit(arr), z)


def _bracket_term(x: np.ndarray, t: float) -> np.ndarray:
    """(1 - exp(x t / 4)) / x, equal to -t/4 at x = 0."""
    small = np.abs(x) < _SINGULAR_DENOMINATOR
    safe = np.where(small, 1.0, x)
    value = -np.expm1(safe * t / 4.0) / safe
    return np.where(small, -t / 4.0, value)


def _bracket_derivative(order: int, x: float, t: float) -> float:
    """
    order-th derivative of _bracket_term at x.

    Uses _bracket_term(x) = -integral_0^{t/4} exp(s x) ds, so the derivative
    is a smooth moment integral, evaluated by Gauss-Legendre quadrature.
    """
    half = t / 8.0
    s = half * (_GAUSS_NODES + 1.0)
    return float(-half * np.sum(_GAUSS_WEIGHTS * s ** order * np.exp(s * x)))


def tsp_occupation(params: TspParams, z: ArrayLike,
                   variant: TspVariant = SELECTED_TSP_VARIANT) -> np.ndarray:
    """
    Complex evaluation of the b-mode occupation for a constant coupling alpha = z.

    Args:
        params: Evolution time and decay rates
        z: Pre-activation(s), used unchanged as the coupling strength
        variant: Sign convention of the second exponent

    Returns:
        Complex array; the physical value is its real part.
    """
    alpha = _require_finite(z)
    delta = params.delta(alpha)
    u = params.u
    t = params.t

    first = _bracket_term(delta - u, t)
    if variant is TspVariant.DECAYING:
        # (1 - exp(-t(Delta+u)/4)) / (Delta+u) == -f(-(Delta+u))
        bracket = first - _bracket_term(-(delta + u), t)
        near_zero = np.abs(delta) < _SINGULAR_DELTA
        safe_delta = np.where(near_zero, 1.0, delta)
        # Odd in Delta: bracket / Delta = 2 f'(-u) + f'''(-u) Delta^2 / 3 + O(Delta^4)
        series = (2.0 * _bracket_derivative(1, -u, t)
                  + _bracket_derivative(3, -u, t) * delta ** 2 / 3.0)
        ratio = np.where(near_zero, series, bracket / safe_delta)
    else:
        bracket = first + _bracket_term(delta + u, t)
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = bracket / delta

    prefactor = 64.0 * alpha ** 2 * params.zeta * params.kappa
    return prefactor * ratio ** 2 * np.exp(-t * params.zeta)


def tsp_probability(params: TspParams, z: ArrayLike) -> ArrayLike:
    """
    Occupation probability of the undriven mode after single-photon driving.

    Couplings beyond TSP_ASYMPTOTIC_COUPLING return 0, the strong-coupling
    limit; evaluating the closed form there would overflow.

    Raises:
        InternalConsistencyError: If the complex result is not finite, has a
            non-negligible imaginary part or leaves [0, 1] by more than round-off.
    """
    alpha = _require_finite(z)
    strong = np.abs(alpha) > TSP_ASYMPTOTIC_COUPLING
    value = np.asarray(tsp_occupation(params, np.where(strong, 0.0, alpha), SELECTED_TSP_VARIANT))
    if not np.all(np.isfinite(value)):
        raise InternalConsistencyError(
            f"TSP occupation is not finite for params {params}"
        )
    residual = np.max(np.abs(value.imag)) if value.size else 0.0
    if residual >= TSP_IMAG_TOLERANCE:
        raise InternalConsistencyError(
            f"TSP occupation has imaginary residual {residual:.3e} for params {params}"
        )
    real = value.real
    if real.size and (real.min() < -TSP_RANGE_TOLERANCE or real.max() > 1.0 + TSP_RANGE_TOLERANCE):
        raise InternalConsistencyError(
            f"TSP occupation outside [0, 1]: min={real.min():.3e} max={real.max():.3e}"
        )
    return _as_output(np.where(strong, 0.0, np.clip(real, 0.0, 1.0)), z)


@dataclass(frozen=True)
class NeuronModel:
    """Tagged activation-probability family mapping pre-activation to probability."""
    kind: NeuronKind
    tsp_params: Optional[TspParams] = None

    def __post_init__(self):
        if self.kind is NeuronKind.TSP and self.tsp_params is None:
            raise ConfigurationError("TSP neuron requires tsp_params")
        if self.kind is not NeuronKind.TSP and self.tsp_params is not None:
            raise ConfigurationError(f"{self.kind.value} neuron takes no tsp_params")

    @classmethod
    def parse(cls, name: str, tsp_params: Optional[TspParams] = None) -> 'NeuronModel':
        """Build a model from its config name ("SPD", "SET" or "TSP")."""
        try:
            kind = NeuronKind(str(name).upper())
        except ValueError:
            raise ConfigurationError(f"Unknown neuron model: {name}")
        if kind is NeuronKind.TSP:
            return cls(kind, tsp_params or TspParams.reference())
        return cls(kind)

    @property
    def name(self) -> str:
        return self.kind.value

    def activation_probability(self, z: ArrayLike) -> ArrayLike:
        if self.kind is NeuronKind.SPD:
            return spd_probability(z)
        if self.kind is NeuronKind.SET:
            return set_probability(z)
        return tsp_probability(self.tsp_params, z)

    def derivative(self, z: ArrayLike) -> ArrayLike:
        """dp/dz: analytic for SPD and SET, central difference for TSP."""
        arr = _require_finite(z)
        if self.kind is NeuronKind.SPD:
            result = 2.0 * arr * np.exp(-arr ** 2)
        elif self.kind is NeuronKind.SET:
            s = expit(arr)
            result = s * (1.0 - s)
        else:
            step = TSP_DERIVATIVE_STEP
            upper = np.asarray(tsp_probability(self.tsp_params, arr + step))
            lower = np.asarray(tsp_probability(self.tsp_params, arr - step))
            result = (upper - lower) / (2.0 * step)
        return _as_output(result, z)

    def to_dict(self) -> dict:
        data = {'kind': self.kind.value}
        if self.tsp_params is not None:
            data['tsp_params'] = self.tsp_params.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'NeuronModel':
        params = data.get('tsp_params')
        return cls.parse(data['kind'], TspParams(**params) if params else None)


def activation_probability(model: NeuronModel, z: ArrayLike) -> ArrayLike:
    return model.activation_probability(z)


def probability_derivative(model: NeuronModel, z: ArrayLike) -> ArrayLike:
    return model.derivative(z)


def autonomous_derivative(model: NeuronModel, p: ArrayLike) -> ArrayLike:
    """
    The function g with p'(z) = g(p(z)), for models admitting one.

    Only the sigmoid-shaped SET neuron qualifies: g(p) = p (1 - p).
    SPD and TSP are even in z with odd derivatives, so no such g exists.
    """
    if model.kind is not NeuronKind.SET:
        raise ConfigurationError(
            f"{model.name} neuron has no autonomous derivative; empirical gradients need SET"
        )
    arr = np.asarray(p, dtype=float)
    return _as_output(arr * (1.0 - arr), p)


def sample_counts(p: np.ndarray, trials: int, rng: np.random.Generator) -> np.ndarray:
    """Number of successes among `trials` Bernoulli(p) draws, element-wise."""
    if trials < 1:
        raise DomainError(f"trial budget must be >= 1, got {trials}")
    return rng.binomial(trials, np.clip(p, 0.0, 1.0))


def sample_activation(model: NeuronModel, z: float, trials: int,
                      rng: np.random.Generator) -> EmpiricalActivation:
    """
    Draw K independent binary outcomes of a neuron and return their mean.

    Args:
        model: Neuron model providing p(z)
        z: Pre-activation
        trials: Number of physical samples K (>= 1)
        rng: Caller-owned random stream

    Returns:
        EmpiricalActivation with E[mean] = p(z)
    """
    if trials < 1:
        raise DomainError(f"trial budget must be >= 1, got {trials}")
    p = model.activation_probability(float(z))
    count = int(sample_counts(np.asarray(p), trials, rng))
    return EmpiricalActivation(mean=count / trials, trials=int(trials))

"""
Backward-pass gradient rules for stochastic neuron layers.

Hidden layers: true probability (TP), empirical gradient (EG) and
straight-through (ST). Output layers: softmax with cross entropy under
TP/EG/ST, or linear activations with mean squared error.

All rules accept a single vector or a (batch, width) array and act row-wise.
"""

import logging
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Sequence, Union

import numpy as np

from neuron_models import EmpiricalActivation, NeuronKind, NeuronModel, autonomous_derivative
from psn_exceptions import (
    ConfigurationError,
    DegenerateJacobianError,
    DomainError,
    InternalConsistencyError,
    ShapeError,
)

logger = logging.getLogger(__name__)

DEFAULT_SMOOTHING_EPSILON = 1e-12
SIMPLEX_TOLERANCE = 1e-9
JACOBIAN_IDENTITY_TOLERANCE = 1e-12
SET_MODEL = NeuronModel(NeuronKind.SET)


class GradientRule(Enum):
    """Backward rule for one layer."""
    TP = "TP"
    EG = "EG"
    ST = "ST"


class OutputHead(Enum):
    """Output activation and loss pairing."""
    SOFTMAX_CE = "SOFTMAX_CE"
    LINEAR_MSE = "LINEAR_MSE"


@dataclass(frozen=True)
class EstimatorConfig:
    """Per-layer choice of backward rule, output head and sample smoothing."""
    hidden_rule: GradientRule = GradientRule.TP
    output_rule: GradientRule = GradientRule.TP
    output_head: OutputHead = OutputHead.SOFTMAX_CE
    smoothing_epsilon: float = DEFAULT_SMOOTHING_EPSILON

    def __post_init__(self):
        if not 0.0 < self.smoothing_epsilon < 1.0:
            raise ConfigurationError(
                f"smoothing_epsilon must lie in (0, 1), got {self.smoothing_epsilon}"
            )
        if self.output_rule is GradientRule.EG and self.output_head is not OutputHead.SOFTMAX_CE:
            raise ConfigurationError("EG output rule requires the SOFTMAX_CE output head")

    @classmethod
    def parse(cls, hidden_rule: str, output_rule: str, output_head: str = "SOFTMAX_CE",
              smoothing_epsilon: float = DEFAULT_SMOOTHING_EPSILON) -> 'EstimatorConfig':
        try:
            return cls(GradientRule(hidden_rule.upper()), GradientRule(output_rule.upper()),
                       OutputHead(output_head.upper()), float(smoothing_epsilon))
        except ValueError as e:
            raise ConfigurationError(f"Invalid estimator setting: {e}")

    def validate(self, model: NeuronModel) -> None:
        """Reject estimator/model combinations with no autonomous derivative."""
        if self.hidden_rule is GradientRule.EG:
            autonomous_derivative(model, 0.5)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['hidden_rule'] = self.hidden_rule.value
        data['output_rule'] = self.output_rule.value
        data['output_head'] = self.output_head.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'EstimatorConfig':
        return cls.parse(data['hidden_rule'], data['output_rule'],
                         data.get('output_head', 'SOFTMAX_CE'),
                         data.get('smoothing_epsilon', DEFAULT_SMOOTHING_EPSILON))


@dataclass
class LayerGradSignal:
    """Gradients of the loss for one dense layer."""
    dL_dz: np.ndarray
    dL_dW: np.ndarray
    dL_db: np.ndarray

    def check_shapes(self, out_dim: int, in_dim: int) -> None:
        if self.dL_dW.shape != (out_dim, in_dim) or self.dL_db.shape != (out_dim,):
            raise ShapeError(
                f"gradient shapes {self.dL_dW.shape}/{self.dL_db.shape} "
                f"do not match layer ({out_dim}, {in_dim})"
            )


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_simplex(p: np.ndarray, what: str) -> None:
    if np.any(p < -SIMPLEX_TOLERANCE) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE):
        raise DomainError(f"{what} is not a probability vector")


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = np.asarray(z, dtype=float)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def hidden_backward_tp(model: NeuronModel, z: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """dL/dz = p'(z) * dL/dh, the diagonal Jacobian of the expected activation."""
    z = np.asarray(z, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    _same_shape(z, upstream, "hidden_backward_tp")
    return np.asarray(model.derivative(z)) * upstream


def _empirical_means(hhat) -> np.ndarray:
    if isinstance(hhat, EmpiricalActivation):
        return np.asarray(hhat.mean, dtype=float)
    if isinstance(hhat, (list, tuple)) and hhat and isinstance(hhat[0], EmpiricalActivation):
        return np.array([h.mean for h in hhat], dtype=float)
    return np.asarray(hhat, dtype=float)


def hidden_backward_eg(hhat: Union[np.ndarray, Sequence[EmpiricalActivation]],
                       upstream: np.ndarray,
                       model: NeuronModel = SET_MODEL) -> np.ndarray:
    """
    Empirical gradient dL/dz = g(h_hat) * dL/dh, with g the autonomous derivative of the model.

    For the SET neuron g(h) = h (1 - h), so with a single trial every h_hat
    is 0 or 1 and the gradient vanishes.

    Raises:
        ConfigurationError: For models without an autonomous derivative
    """
    means = _empirical_means(hhat)
    upstream = np.asarray(upstream, dtype=float)
    _same_shape(means, upstream, "hidden_backward_eg")
    if np.any(means < 0.0) or np.any(means > 1.0):
        raise DomainError("empirical activations must lie in [0, 1]")
    return np.asarray(autonomous_derivative(model, means)) * upstream


def hidden_backward_st(upstream: np.ndarray) -> np.ndarray:
    """Identity surrogate: dL/dz = dL/dh."""
    return np.array(upstream, dtype=float, copy=True)


def smooth_probs(phat: np.ndarray, epsilon: float = DEFAULT_SMOOTHING_EPSILON) -> np.ndarray:
    """
    Mix empirical class probabilities with the uniform distribution.

    Returns (1 - epsilon) * phat + epsilon / C, so every entry is at least epsilon / C.
    """
    phat = np.asarray(phat, dtype=float)
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"smoothing epsilon must lie in (0, 1), got {epsilon}")
    _check_simplex(phat, "smooth_probs input")
    classes = phat.shape[-1]
    return (1.0 - epsilon) * phat + epsilon / classes


def empirical_jacobian(phat: np.ndarray) -> np.ndarray:
    """Softmax Jacobian diag(p) - p p^T evaluated at (possibly sampled) probabilities."""
    phat = np.asarray(phat, dtype=float)
    outer = phat[..., :, None] * phat[..., None, :]
    return phat[..., :, None] * np.eye(phat.shape[-1]) - outer


def jacobian_transpose_product(jacobian: np.ndarray, vector: np.ndarray) -> np.ndarray:
    """J^T v for a single Jacobian or a batch of them."""
    return np.einsum('...ij,...i->...j', jacobian, vector)


def output_backward_softmax_tp(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact softmax cross-entropy gradient p - y."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    _same_shape(p, y, "output_backward_softmax_tp")
    return p - y


def output_backward_softmax_eg(phat_smoothed: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Empirical-gradient rule through the smoothed empirical Jacobian.

    Computes J_s^T (-y / p_s) explicitly and checks it against the closed
    form p_s - y that holds for one-hot targets.

    Raises:
        DegenerateJacobianError: If any probability is zero (smooth first)
    """
    ps = np.asarray(phat_smoothed, dtype=float)
    y = np.asarray(y, dtype=float)
    _same_shape(ps, y, "output_backward_softmax_eg")
    if np.any(ps <= 0.0):
        raise DegenerateJacobianError(
            "empirical softmax Jacobian needs strictly positive probabilities; apply smooth_probs"
        )
    _check_simplex(ps, "smoothed empirical probabilities")

    dL_dp = -y / ps
    grad = jacobian_transpose_product(empirical_jacobian(ps), dL_dp)

    gap = np.max(np.abs(grad - (ps - y))) if grad.size else 0.0
    if gap > JACOBIAN_IDENTITY_TOLERANCE:
        raise InternalConsistencyError(f"empirical Jacobian product deviates from p_s - y by {gap:.3e}")
    return grad


def output_backward_softmax_st(phat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Straight-through rule for sampled softmax: p_hat - y."""
    phat = np.asarray(phat, dtype=float)
    y = np.asarray(y, dtype=float)
    _same_shape(phat, y, "output_backward_softmax_st")
    return phat - y


def output_backward_linear_mse(h: np.ndarray, y: np.ndarray, n_out: int) -> np.ndarray:
    """Gradient of mean((h - y)^2) over the output dimension: 2 (h - y) / n_out."""
    h = np.asarray(h, dtype=float)
    y = np.asarray(y, dtype=float)
    _same_shape(h, y, "output_backward_linear_mse")
    return (2.0 / n_out) * (h - y)


def check_autonomous_representation(model, grid: Sequence[float]) -> bool:
    """
    Test whether p(z1) = p(z2) implies p'(z1) = p'(z2) on a grid.

    Args:
        model: Anything exposing activation_probability(z) and derivative(z)
        grid: Pre-activation points

    Returns:
        True when every pair with |p1 - p2| < 1e-9 also has |p1' - p2'| < 1e-6
    """
    z = np.asarray(grid, dtype=float)
    if z.size < 2:
        return True
    p = np.broadcast_to(np.asarray(model.activation_probability(z), dtype=float), z.shape)
    dp = np.broadcast_to(np.asarray(model.derivative(z), dtype=float), z.shape)
    same_p = np.abs(p[:, None] - p[None, :]) < 1e-9
    same_dp = np.abs(dp[:, None] - dp[None, :]) < 1e-6
    return bool(np.all(same_dp[same_p]))

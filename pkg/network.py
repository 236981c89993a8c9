"""
Stochastic feedforward network built from physical stochastic neurons.

Dense layers feed sampled empirical activations forward under a trial
budget; the backward pass dispatches to the estimator rules per layer and
parameters are updated with plain minibatch SGD.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

import estimators as est
from estimators import EstimatorConfig, GradientRule, LayerGradSignal, OutputHead
from mnist_data import Dataset, batches
from neuron_models import NeuronKind, NeuronModel, sample_counts
from psn_exceptions import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    DomainError,
    NumericError,
    ShapeError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# Stream tag separating evaluation sampling from training sampling
_EVAL_STREAM = 0x45564C


class EvalMode(Enum):
    """How the network is run at evaluation time."""
    SAMPLED = "SAMPLED"
    MEAN_FIELD = "MEAN_FIELD"


@dataclass(frozen=True)
class TrialBudget:
    """Number of physical samples K per neuron per forward pass; None means infinite."""
    trials: Optional[int] = None

    def __post_init__(self):
        if self.trials is not None and (not isinstance(self.trials, (int, np.integer)) or self.trials < 1):
            raise ConfigurationError(f"finite trial budget needs K >= 1, got {self.trials}")

    @classmethod
    def finite(cls, trials: int) -> 'TrialBudget':
        return cls(int(trials))

    @classmethod
    def infinite(cls) -> 'TrialBudget':
        return cls(None)

    @classmethod
    def parse(cls, value: Union[int, str, None]) -> 'TrialBudget':
        """Accept an integer K or "inf"/"INFINITE"/None."""
        if value is None or (isinstance(value, str) and value.strip().lower() in ("inf", "infinite")):
            return cls.infinite()
        try:
            return cls.finite(int(value))
        except (TypeError, ValueError):
            raise ConfigurationError(f"Invalid trial budget: {value!r}")

    @property
    def is_infinite(self) -> bool:
        return self.trials is None

    def to_value(self) -> Union[int, str]:
        return "inf" if self.trials is None else self.trials

    def __str__(self) -> str:
        return "inf" if self.trials is None else str(self.trials)


@dataclass
class DenseLayer:
    """Affine map z = W h + b."""
    weights: np.ndarray
    bias: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    def pre_activation(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weights.T + self.bias


@dataclass
class NetworkConfig:
    """Architecture, neuron physics, trial budgets, estimator rules and SGD settings."""
    layer_dims: List[int] = field(default_factory=lambda: [784, 400, 10])
    neuron_model: NeuronModel = field(default_factory=lambda: NeuronModel(NeuronKind.SET))
    hidden_trials: TrialBudget = field(default_factory=lambda: TrialBudget.finite(10))
    output_trials: TrialBudget = field(default_factory=TrialBudget.infinite)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    seed: int = 0
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 20

    def validate(self) -> None:
        """
        Check structural and estimator constraints.

        Raises:
            ConfigurationError: On any invalid combination
        """
        if len(self.layer_dims) < 3:
            raise ConfigurationError(f"need at least one hidden layer, got dims {self.layer_dims}")
        if any(int(d) < 1 for d in self.layer_dims):
            raise ConfigurationError(f"layer dimensions must be positive: {self.layer_dims}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

        self.estimator.validate(self.neuron_model)

        if self.estimator.output_head is OutputHead.LINEAR_MSE and not self.output_trials.is_infinite:
            raise ConfigurationError("linear output head has no sampling; output_trials must be infinite")

        if self.estimator.hidden_rule is GradientRule.EG and self.hidden_trials.trials == 1:
            logger.warning("EG hidden rule with K=1: every empirical activation is 0 or 1, "
                           "hidden gradients will be exactly zero")

    @property
    def hidden_layer_count(self) -> int:
        return len(self.layer_dims) - 2

    def to_dict(self) -> dict:
        return {
            'layer_dims': [int(d) for d in self.layer_dims],
            'neuron_model': self.neuron_model.to_dict(),
            'hidden_trials': self.hidden_trials.to_value(),
            'output_trials': self.output_trials.to_value(),
            'estimator': self.estimator.to_dict(),
            'seed': int(self.seed),
            'learning_rate': self.learning_rate,
            'batch_size': self.batch_size,
            'epochs': self.epochs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkConfig':
        return cls(
            layer_dims=[int(d) for d in data['layer_dims']],
            neuron_model=NeuronModel.from_dict(data['neuron_model']),
            hidden_trials=TrialBudget.parse(data['hidden_trials']),
            output_trials=TrialBudget.parse(data['output_trials']),
            estimator=EstimatorConfig.from_dict(data['estimator']),
            seed=int(data['seed']),
            learning_rate=float(data['learning_rate']),
            batch_size=int(data['batch_size']),
            epochs=int(data['epochs']),
        )


@dataclass
class LayerTrace:
    """
    What one layer's forward pass left for the backward pass.

    activation is the value actually passed on (or emitted): the sampled
    mean when a finite budget was used, the exact probability otherwise.
    """
    z: np.ndarray
    activation: np.ndarray
    p: Optional[np.ndarray] = None
    hhat: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    """Per-layer record of a forward pass over a batch."""
    inputs: np.ndarray
    hidden: List[LayerTrace]
    output: LayerTrace

    @property
    def output_vector(self) -> np.ndarray:
        return self.output.activation

    def layer_input(self, index: int) -> np.ndarray:
        """Activation fed into dense layer `index` (0 is the first hidden layer)."""
        return self.inputs if index == 0 else self.hidden[index - 1].activation


class Network:
    """Dense layers plus the configuration they were built from."""

    def __init__(self, config: NetworkConfig, layers: List[DenseLayer],
                 rng: Optional[np.random.Generator] = None):
        self.config = config
        self.layers = layers
        # Continues the initialization stream; shuffles epochs when no stream is passed
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.epochs_completed = 0
        self.logger = logging.getLogger(__name__)

    @property
    def model(self) -> NeuronModel:
        return self.config.neuron_model

    def parameters_equal(self, other: 'Network') -> bool:
        """Bit-exact comparison of all weights and biases."""
        if len(self.layers) != len(other.layers):
            return False
        return all(np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                   for a, b in zip(self.layers, other.layers))


def init_network(config: NetworkConfig) -> Network:
    """
    Build a network with weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] and zero biases.

    Deterministic given config.seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    layers = []
    for fan_in, fan_out in zip(config.layer_dims[:-1], config.layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(DenseLayer(weights=weights, bias=np.zeros(fan_out)))
    logger.debug(f"Initialized network {config.layer_dims} ({config.hidden_layer_count} hidden) "
                 f"with seed {config.seed}")
    return Network(config, layers, rng)


def _as_batch(inputs: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer_dims[0]={width}")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("input entries must lie in [0, 1]")
    return x


def forward(net: Network, inputs: np.ndarray, rng: Optional[np.random.Generator],
            mode: EvalMode = EvalMode.SAMPLED) -> ForwardTrace:
    """
    Run a batch through the network, sampling every stochastic neuron.

    Args:
        net: Network to evaluate
        inputs: (batch, layer_dims[0]) or a single vector, entries in [0, 1]
        rng: Random stream for sampling (unused in MEAN_FIELD mode)
        mode: SAMPLED uses the configured budgets, MEAN_FIELD treats all as infinite

    Returns:
        ForwardTrace with pre-activations, probabilities and sampled means

    Raises:
        NumericError: If a pre-activation overflows, naming the layer
    """
    config = net.config
    h = _as_batch(inputs, config.layer_dims[0])
    hidden_budget = config.hidden_trials if mode is EvalMode.SAMPLED else TrialBudget.infinite()
    output_budget = config.output_trials if mode is EvalMode.SAMPLED else TrialBudget.infinite()
    if rng is None and not (hidden_budget.is_infinite and output_budget.is_infinite):
        raise ContractError("sampled forward pass needs a random stream")

    trace = ForwardTrace(inputs=h, hidden=[], output=None)
    for index, layer in enumerate(net.layers[:-1]):
        z = layer.pre_activation(h)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation in hidden layer {index}")
        p = np.asarray(net.model.activation_probability(z))
        if hidden_budget.is_infinite:
            trace.hidden.append(LayerTrace(z=z, activation=p, p=p))
            h = p
        else:
            hhat = sample_counts(p, hidden_budget.trials, rng) / hidden_budget.trials
            trace.hidden.append(LayerTrace(z=z, activation=hhat, p=p, hhat=hhat))
            h = hhat

    last = len(net.layers) - 1
    z = net.layers[-1].pre_activation(h)
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite pre-activation in output layer {last}")

    if config.estimator.output_head is OutputHead.LINEAR_MSE:
        trace.output = LayerTrace(z=z, activation=z, p=z)
    else:
        p = est.softmax(z)
        if output_budget.is_infinite:
            trace.output = LayerTrace(z=z, activation=p, p=p)
        else:
            phat = rng.multinomial(output_budget.trials, p) / output_budget.trials
            trace.output = LayerTrace(z=z, activation=phat, p=p, hhat=phat)
    return trace


def _output_gradient(trace: ForwardTrace, targets: np.ndarray, estimator: EstimatorConfig) -> np.ndarray:
    out = trace.output
    if estimator.output_head is OutputHead.LINEAR_MSE:
        return est.output_backward_linear_mse(out.activation, targets, out.activation.shape[-1])
    if estimator.output_rule is GradientRule.TP:
        if out.p is None:
            raise ContractError("TP output rule needs the true softmax probabilities in the trace")
        return est.output_backward_softmax_tp(out.p, targets)
    if estimator.output_rule is GradientRule.EG:
        smoothed = est.smooth_probs(out.activation, estimator.smoothing_epsilon)
        return est.output_backward_softmax_eg(smoothed, targets)
    return est.output_backward_softmax_st(out.activation, targets)


def _hidden_gradient(net: Network, layer_trace: LayerTrace, index: int,
                     upstream: np.ndarray, rule: GradientRule) -> np.ndarray:
    if rule is GradientRule.TP:
        if layer_trace.p is None:
            raise ContractError(f"TP rule needs pre-activations and probabilities for hidden layer {index}")
        return est.hidden_backward_tp(net.model, layer_trace.z, upstream)
    if rule is GradientRule.EG:
        # Infinite budget: the empirical mean is the probability itself
        hhat = layer_trace.hhat if layer_trace.hhat is not None else layer_trace.p
        if hhat is None:
            raise ContractError(f"EG rule needs empirical activations for hidden layer {index}")
        return est.hidden_backward_eg(hhat, upstream, net.model)
    return est.hidden_backward_st(upstream)


def backward(net: Network, trace: ForwardTrace, targets: np.ndarray,
             estimator: Optional[EstimatorConfig] = None) -> List[LayerGradSignal]:
    """
    Batch-mean gradients for every layer, in layer order.

    dL/dW uses the activation actually fed forward (sampled means under
    finite budgets); the upstream signal for layer l-1 is W^T dL/dz.
    """
    estimator = estimator or net.config.estimator
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape != trace.output.z.shape:
        raise ShapeError(f"targets {targets.shape} do not match output {trace.output.z.shape}")

    batch = targets.shape[0]
    grads: List[Optional[LayerGradSignal]] = [None] * len(net.layers)
    dL_dz = _output_gradient(trace, targets, estimator)

    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        h_prev = trace.layer_input(index)
        grads[index] = LayerGradSignal(
            dL_dz=dL_dz,
            dL_dW=dL_dz.T @ h_prev / batch,
            dL_db=dL_dz.mean(axis=0),
        )
        if index == 0:
            break
        upstream = dL_dz @ layer.weights
        dL_dz = _hidden_gradient(net, trace.hidden[index - 1], index - 1, upstream, estimator.hidden_rule)
    return grads


def loss(output: np.ndarray, target: np.ndarray, head: OutputHead,
         smoothing: float = est.DEFAULT_SMOOTHING_EPSILON) -> float:
    """
    Batch-mean loss of an output vector.

    Cross entropy is taken on smoothed probabilities so that sampled
    outputs that miss the target class stay finite.
    """
    output = np.atleast_2d(np.asarray(output, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if output.shape != target.shape:
        raise ShapeError(f"output {output.shape} and target {target.shape} differ")
    if head is OutputHead.LINEAR_MSE:
        return float(np.mean(np.mean((output - target) ** 2, axis=-1)))
    smoothed = est.smooth_probs(output, smoothing)
    return float(np.mean(-np.sum(target * np.log(smoothed), axis=-1)))


def sgd_step(net: Network, grads: List[LayerGradSignal], lr: float) -> None:
    """
    W <- W - lr dL/dW, b <- b - lr dL/db for every layer.

    Raises:
        NumericError: If any gradient is non-finite; no parameter is touched
    """
    if len(grads) != len(net.layers):
        raise ShapeError(f"{len(grads)} gradients for {len(net.layers)} layers")
    for index, (layer, grad) in enumerate(zip(net.layers, grads)):
        grad.check_shapes(layer.out_dim, layer.in_dim)
        if not (np.all(np.isfinite(grad.dL_dW)) and np.all(np.isfinite(grad.dL_db))):
            raise NumericError(f"non-finite gradient in layer {index}; update aborted")
    for layer, grad in zip(net.layers, grads):
        layer.weights -= lr * grad.dL_dW
        layer.bias -= lr * grad.dL_db


def predict(net: Network, inputs: np.ndarray, rng: Optional[np.random.Generator],
            mode: EvalMode = EvalMode.SAMPLED) -> np.ndarray:
    """Argmax class of the (possibly sampled) output vector per row."""
    return np.argmax(forward(net, inputs, rng, mode).output_vector, axis=-1)


def evaluate(net: Network, dataset: Dataset, mode: EvalMode = EvalMode.SAMPLED,
             seed: Optional[int] = None, batch_size: int = 1000) -> float:
    """
    Classification accuracy over a dataset.

    SAMPLED mode draws from a stream derived from the network seed (or
    `seed`), so the result is deterministic; MEAN_FIELD needs no stream.

    Raises:
        DomainError: On an empty dataset
    """
    if len(dataset) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    base = net.config.seed if seed is None else seed
    rng = np.random.default_rng([base, _EVAL_STREAM]) if mode is EvalMode.SAMPLED else None
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        predicted = predict(net, images, rng, mode)
        correct += int(np.sum(predicted == np.argmax(labels, axis=-1)))
    return correct / len(dataset)


def train_epoch(net: Network, dataset: Dataset, epoch: int,
                rng: Optional[np.random.Generator] = None) -> float:
    """
    One shuffled pass of forward, backward and SGD over the dataset.

    Batches are shuffled with `rng` (the network's own stream when omitted);
    each batch samples from a stream derived from (seed, epoch, batch_index).

    Returns:
        Mean training loss over batches
    """
    config = net.config
    shuffle_rng = rng if rng is not None else net.rng
    losses = []
    for batch_index, (images, labels) in enumerate(batches(dataset, config.batch_size, shuffle_rng)):
        rng = np.random.default_rng([config.seed, epoch, batch_index])
        trace = forward(net, images, rng)
        losses.append(loss(trace.output_vector, labels, config.estimator.output_head,
                           config.estimator.smoothing_epsilon))
        grads = backward(net, trace, labels)
        sgd_step(net, grads, config.learning_rate)
        if batch_index % 100 == 0:
            net.logger.debug(f"epoch {epoch} batch {batch_index} loss {losses[-1]:.4f}")
    net.epochs_completed = epoch + 1
    return float(np.mean(losses))


def save_checkpoint(net: Network, path: Union[str, Path]) -> Path:
    """Write a versioned .npz holding dims, parameters, config and training position."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        'format_version': np.array(CHECKPOINT_FORMAT_VERSION),
        'layer_dims': np.array(net.config.layer_dims, dtype=np.int64),
        'config_json': np.array(json.dumps(net.config.to_dict(), sort_keys=True)),
        'epochs_completed': np.array(net.epochs_completed, dtype=np.int64),
        'rng_state_json': np.array(json.dumps(net.rng.bit_generator.state)),
    }
    for index, layer in enumerate(net.layers):
        arrays[f'weights_{index}'] = layer.weights
        arrays[f'bias_{index}'] = layer.bias
    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Network:
    """
    Restore a network written by save_checkpoint, bit-exactly.

    Raises:
        DataFormatError: If the file is missing fields or has an unknown version
    """
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data['format_version'])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
            config = NetworkConfig.from_dict(json.loads(str(data['config_json'])))
            layers = [DenseLayer(weights=data[f'weights_{i}'].copy(), bias=data[f'bias_{i}'].copy())
                      for i in range(len(config.layer_dims) - 1)]
            epochs_completed = int(data['epochs_completed'])
            rng_state = json.loads(str(data['rng_state_json']))
    except (KeyError, ValueError, OSError) as e:
        raise DataFormatError(f"{path}: unreadable checkpoint ({e})")

    rng = np.random.default_rng()
    rng.bit_generator.state = rng_state
    net = Network(config, layers, rng)
    net.epochs_completed = epochs_completed
    return net

"""Tests for the stochastic network: forward sampling, gradients, SGD, evaluation, checkpoints."""

import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from estimators import EstimatorConfig, GradientRule, LayerGradSignal, OutputHead
from mnist_data import Dataset, Split
from network import (
    DenseLayer,
    EvalMode,
    ForwardTrace,
    LayerTrace,
    Network,
    NetworkConfig,
    TrialBudget,
    backward,
    evaluate,
    forward,
    init_network,
    load_checkpoint,
    loss,
    predict,
    save_checkpoint,
    sgd_step,
    train_epoch,
)
from neuron_models import NeuronModel
from psn_exceptions import (
    ConfigurationError,
    ContractError,
    DomainError,
    NumericError,
    ShapeError,
)

INF = TrialBudget.infinite()


def tiny_config(model="SET", head=OutputHead.SOFTMAX_CE, hidden=GradientRule.TP,
                output=GradientRule.TP, hidden_trials=INF, output_trials=INF,
                dims=(6, 4, 3), seed=0, **kwargs):
    return NetworkConfig(
        layer_dims=list(dims),
        neuron_model=NeuronModel.parse(model),
        hidden_trials=hidden_trials,
        output_trials=output_trials,
        estimator=EstimatorConfig(hidden, output, head),
        seed=seed,
        **kwargs,
    )


def random_batch(rng, rows, width, classes):
    x = rng.uniform(0.0, 1.0, size=(rows, width))
    y = np.eye(classes)[rng.integers(0, classes, rows)]
    return x, y


def random_dataset(rows=400, seed=0):
    rng = np.random.default_rng(seed)
    x, y = random_batch(rng, rows, 784, 10)
    return Dataset(x, y, Split.TEST)


class TestTrialBudget:

    def test_parse(self):
        assert TrialBudget.parse("inf").is_infinite
        assert TrialBudget.parse(None).is_infinite
        assert TrialBudget.parse(5).trials == 5
        assert str(TrialBudget.parse("7")) == "7"

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TrialBudget.parse(0)
        with pytest.raises(ConfigurationError):
            TrialBudget.parse("many")


class TestConfig:

    def test_defaults_follow_published_setup(self):
        config = NetworkConfig()
        assert config.layer_dims == [784, 400, 10]
        assert config.learning_rate == 0.001
        assert config.batch_size == 128
        assert config.epochs == 20

    def test_eg_hidden_rejected_for_spd(self):
        with pytest.raises(ConfigurationError):
            tiny_config(model="SPD", hidden=GradientRule.EG).validate()

    def test_linear_head_cannot_be_sampled(self):
        with pytest.raises(ConfigurationError):
            tiny_config(head=OutputHead.LINEAR_MSE, output_trials=TrialBudget.finite(3)).validate()

    def test_needs_hidden_layer(self):
        with pytest.raises(ConfigurationError):
            init_network(tiny_config(dims=(784, 10)))

    def test_eg_single_trial_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="network"):
            tiny_config(hidden=GradientRule.EG, hidden_trials=TrialBudget.finite(1)).validate()
        assert "K=1" in caplog.text

    def test_dict_round_trip(self):
        config = tiny_config(model="TSP", hidden_trials=TrialBudget.finite(3))
        assert NetworkConfig.from_dict(config.to_dict()) == config


class TestInit:

    def test_same_seed_same_parameters(self):
        a = init_network(NetworkConfig(seed=5))
        b = init_network(NetworkConfig(seed=5))
        assert a.parameters_equal(b)
        assert not a.parameters_equal(init_network(NetworkConfig(seed=6)))

    def test_uniform_fan_in_bound(self):
        net = init_network(NetworkConfig())
        first = net.layers[0].weights
        bound = 1 / np.sqrt(784)
        assert first.shape == (400, 784)
        assert np.all(np.abs(first) <= bound)
        assert np.all(net.layers[0].bias == 0.0)
        sigma = bound / np.sqrt(3 * first.size)
        assert abs(first.mean()) < 4 * sigma


class TestForward:

    def test_infinite_budgets_are_deterministic(self):
        net = init_network(tiny_config())
        x = np.random.default_rng(0).uniform(size=(5, 6))
        a = forward(net, x, np.random.default_rng(1))
        b = forward(net, x, np.random.default_rng(2))
        assert_array_equal(a.output_vector, b.output_vector)
        assert a.hidden[0].hhat is None

    def test_hidden_samples_on_count_lattice(self):
        k = 3
        net = init_network(tiny_config(hidden_trials=TrialBudget.finite(k)))
        x = np.random.default_rng(0).uniform(size=(50, 6))
        hhat = forward(net, x, np.random.default_rng(1)).hidden[0].hhat
        assert_allclose(hhat * k, np.round(hhat * k), atol=1e-12)
        assert np.all((hhat >= 0) & (hhat <= 1))

    def test_single_output_trial_is_one_hot(self):
        net = init_network(tiny_config(output_trials=TrialBudget.finite(1)))
        x = np.random.default_rng(0).uniform(size=(20, 6))
        out = forward(net, x, np.random.default_rng(1)).output_vector
        assert_array_equal(out.sum(axis=1), np.ones(20))
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_sampled_hidden_mean_is_unbiased(self):
        k, rows = 3, 20000
        net = init_network(tiny_config(model="SPD", hidden_trials=TrialBudget.finite(k)))
        x = np.tile(np.random.default_rng(0).uniform(size=6), (rows, 1))
        trace = forward(net, x, np.random.default_rng(4))
        p = trace.hidden[0].p[0]
        sigma = np.sqrt(p * (1 - p) / (rows * k))
        assert np.all(np.abs(trace.hidden[0].hhat.mean(axis=0) - p) <= 4 * sigma + 1e-12)

    def test_single_vector_input(self):
        net = init_network(tiny_config())
        trace = forward(net, np.full(6, 0.5), None, EvalMode.MEAN_FIELD)
        assert trace.output_vector.shape == (1, 3)

    def test_input_validation(self):
        net = init_network(tiny_config())
        with pytest.raises(ShapeError):
            forward(net, np.zeros((2, 5)), None, EvalMode.MEAN_FIELD)
        with pytest.raises(DomainError):
            forward(net, np.full((2, 6), 1.5), None, EvalMode.MEAN_FIELD)

    def test_sampling_needs_a_stream(self):
        net = init_network(tiny_config(hidden_trials=TrialBudget.finite(2)))
        with pytest.raises(ContractError):
            forward(net, np.zeros((1, 6)), None)

    def test_overflow_names_the_layer(self):
        net = init_network(tiny_config())
        net.layers[0].weights[:] = 1e308
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericError, match="layer 0"):
                forward(net, np.ones((1, 6)), None, EvalMode.MEAN_FIELD)


def _mean_field_loss(net, x, y):
    trace = forward(net, x, None, EvalMode.MEAN_FIELD)
    return loss(trace.output_vector, y, net.config.estimator.output_head)


@pytest.mark.parametrize("model", ["SPD", "SET", "TSP"])
@pytest.mark.parametrize("head", [OutputHead.SOFTMAX_CE, OutputHead.LINEAR_MSE])
def test_mean_field_gradient_matches_finite_differences(model, head):
    h = 1e-6
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = init_network(tiny_config(model=model, head=head, seed=seed))
        x, y = random_batch(rng, 5, 6, 3)
        grads = backward(net, forward(net, x, None, EvalMode.MEAN_FIELD), y)

        for layer, grad in zip(net.layers, grads):
            for params, analytic in ((layer.weights, grad.dL_dW), (layer.bias, grad.dL_db)):
                numeric = np.zeros_like(params)
                for index in np.ndindex(params.shape):
                    original = params[index]
                    params[index] = original + h
                    upper = _mean_field_loss(net, x, y)
                    params[index] = original - h
                    lower = _mean_field_loss(net, x, y)
                    params[index] = original
                    numeric[index] = (upper - lower) / (2 * h)
                assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


class TestBackward:

    def test_straight_through_hidden_composes_exactly(self):
        net = init_network(tiny_config(hidden=GradientRule.ST))
        x, y = random_batch(np.random.default_rng(0), 4, 6, 3)
        trace = forward(net, x, None, EvalMode.MEAN_FIELD)
        grads = backward(net, trace, y)
        assert_array_equal(grads[0].dL_dz, (trace.output.p - y) @ net.layers[1].weights)

    def test_shapes_for_prime_dimensions(self):
        config = tiny_config(dims=(7, 5, 3, 2), hidden_trials=TrialBudget.finite(2),
                             output_trials=TrialBudget.finite(2), output=GradientRule.EG,
                             hidden=GradientRule.EG)
        net = init_network(config)
        x, y = random_batch(np.random.default_rng(0), 11, 7, 2)
        grads = backward(net, forward(net, x, np.random.default_rng(1)), y)
        for layer, grad in zip(net.layers, grads):
            grad.check_shapes(layer.out_dim, layer.in_dim)
            assert grad.dL_dz.shape == (11, layer.out_dim)

    def test_weight_gradient_uses_sampled_activation(self):
        net = init_network(tiny_config(hidden_trials=TrialBudget.finite(2)))
        x, y = random_batch(np.random.default_rng(0), 6, 6, 3)
        trace = forward(net, x, np.random.default_rng(3))
        grads = backward(net, trace, y)
        expected = grads[1].dL_dz.T @ trace.hidden[0].hhat / 6
        assert_allclose(grads[1].dL_dW, expected)

    def test_single_trial_eg_hidden_gradient_is_zero(self):
        config = tiny_config(hidden=GradientRule.EG, hidden_trials=TrialBudget.finite(1))
        net = init_network(config)
        x, y = random_batch(np.random.default_rng(0), 8, 6, 3)
        grads = backward(net, forward(net, x, np.random.default_rng(1)), y)
        assert_array_equal(grads[0].dL_dW, np.zeros_like(grads[0].dL_dW))

    @pytest.mark.parametrize("seed", range(5))
    def test_eg_hidden_gradient_aligns_with_tp_at_hundred_trials(self, seed):
        config = tiny_config(hidden=GradientRule.EG, hidden_trials=TrialBudget.finite(100),
                             dims=(20, 16, 5), seed=seed)
        net = init_network(config)
        x, y = random_batch(np.random.default_rng(seed), 64, 20, 5)
        trace = forward(net, x, np.random.default_rng(seed + 100))
        empirical = backward(net, trace, y)[0].dL_dW.ravel()
        exact = backward(net, trace, y, EstimatorConfig(GradientRule.TP))[0].dL_dW.ravel()
        cosine = empirical @ exact / (np.linalg.norm(empirical) * np.linalg.norm(exact))
        assert cosine >= 0.99

    def test_missing_probability_is_a_contract_error(self):
        net = init_network(tiny_config())
        x, y = random_batch(np.random.default_rng(0), 2, 6, 3)
        trace = forward(net, x, None, EvalMode.MEAN_FIELD)
        broken = ForwardTrace(trace.inputs, [LayerTrace(z=trace.hidden[0].z, activation=trace.hidden[0].activation)],
                              trace.output)
        with pytest.raises(ContractError):
            backward(net, broken, y)

    def test_target_shape_checked(self):
        net = init_network(tiny_config())
        trace = forward(net, np.zeros((2, 6)), None, EvalMode.MEAN_FIELD)
        with pytest.raises(ShapeError):
            backward(net, trace, np.zeros((2, 4)))


class TestLoss:

    def test_cross_entropy_at_target(self):
        y = np.eye(10)[3]
        assert_allclose(loss(y, y, OutputHead.SOFTMAX_CE, 1e-12), 9e-13, rtol=1e-3)

    def test_cross_entropy_wrong_one_hot(self):
        assert_allclose(loss(np.eye(10)[2], np.eye(10)[3], OutputHead.SOFTMAX_CE, 1e-12),
                        -np.log(1e-13), rtol=1e-6)

    def test_mse(self):
        y = np.eye(10)[3]
        assert loss(y, y, OutputHead.LINEAR_MSE) == 0.0
        assert_allclose(loss(np.zeros(4), np.eye(4)[0], OutputHead.LINEAR_MSE), 0.25)


class TestSgd:

    def test_zero_gradients_and_zero_rate_leave_parameters(self):
        net = init_network(tiny_config())
        before = [layer.weights.copy() for layer in net.layers]
        zeros = [LayerGradSignal(np.zeros((1, l.out_dim)), np.zeros_like(l.weights), np.zeros_like(l.bias))
                 for l in net.layers]
        sgd_step(net, zeros, 0.1)
        x, y = random_batch(np.random.default_rng(0), 3, 6, 3)
        sgd_step(net, backward(net, forward(net, x, None, EvalMode.MEAN_FIELD), y), 0.0)
        for layer, weights in zip(net.layers, before):
            assert_array_equal(layer.weights, weights)

    def test_non_finite_gradient_aborts_whole_step(self):
        net = init_network(tiny_config())
        before = [layer.weights.copy() for layer in net.layers]
        grads = [LayerGradSignal(np.zeros((1, l.out_dim)), np.ones_like(l.weights), np.zeros_like(l.bias))
                 for l in net.layers]
        grads[1].dL_dW[0, 0] = np.nan
        with pytest.raises(NumericError, match="layer 1"):
            sgd_step(net, grads, 0.1)
        for layer, weights in zip(net.layers, before):
            assert_array_equal(layer.weights, weights)

    def test_quadratic_toy_converges(self):
        net = Network(NetworkConfig(), [DenseLayer(np.array([[3.0]]), np.zeros(1))])
        target = -1.25
        for _ in range(10_000):
            w = net.layers[0].weights
            sgd_step(net, [LayerGradSignal(np.zeros((1, 1)), 2 * (w - target), np.zeros(1))], 0.001)
        assert abs(net.layers[0].weights[0, 0] - target) < 1e-6


class TestEvaluate:

    def test_untrained_network_is_at_chance(self):
        net = init_network(NetworkConfig(hidden_trials=TrialBudget.finite(3)))
        data = random_dataset(2000)
        assert abs(evaluate(net, data) - 0.1) < 0.04

    def test_mean_field_ignores_seed(self):
        net = init_network(NetworkConfig())
        data = random_dataset(200)
        assert evaluate(net, data, EvalMode.MEAN_FIELD, seed=1) == evaluate(net, data, EvalMode.MEAN_FIELD, seed=2)

    def test_sampled_is_deterministic(self):
        net = init_network(NetworkConfig())
        data = random_dataset(200)
        assert evaluate(net, data) == evaluate(net, data)

    def test_empty_dataset(self):
        net = init_network(NetworkConfig())
        empty = Dataset(np.zeros((0, 784)), np.zeros((0, 10)), Split.TEST)
        with pytest.raises(DomainError):
            evaluate(net, empty)

    def test_predict_returns_classes(self):
        net = init_network(NetworkConfig())
        classes = predict(net, random_dataset(5).images, None, EvalMode.MEAN_FIELD)
        assert classes.shape == (5,)
        assert np.all((classes >= 0) & (classes < 10))


class TestTraining:

    def test_epoch_is_reproducible(self):
        data = random_dataset(300, seed=1)
        config = NetworkConfig(layer_dims=[784, 16, 10], batch_size=64, seed=3)
        a, b = init_network(config), init_network(config)
        loss_a = train_epoch(a, data, 0)
        loss_b = train_epoch(b, data, 0)
        assert loss_a == loss_b
        assert a.parameters_equal(b)
        assert a.epochs_completed == 1

    def test_training_reduces_loss_on_learnable_data(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 10, 500)
        # Each class lights up its own block of pixels
        images = rng.uniform(0.0, 0.2, size=(500, 784))
        for c in range(10):
            images[labels == c, c * 78:(c + 1) * 78] = 1.0
        data = Dataset(images, np.eye(10)[labels], Split.TRAIN)
        net = init_network(NetworkConfig(layer_dims=[784, 32, 10], batch_size=32, learning_rate=0.5))
        first = train_epoch(net, data, 0)
        for epoch in range(1, 5):
            last = train_epoch(net, data, epoch)
        assert last < first
        assert evaluate(net, data, EvalMode.MEAN_FIELD) > 0.5


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    config = tiny_config(model="TSP", hidden_trials=TrialBudget.finite(3), seed=9)
    net = init_network(config)
    x, y = random_batch(np.random.default_rng(0), 4, 6, 3)
    sgd_step(net, backward(net, forward(net, x, np.random.default_rng(1)), y), 0.1)
    net.epochs_completed = 2

    path = save_checkpoint(net, tmp_path / "ckpt" / "net.npz")
    restored = load_checkpoint(path)

    assert restored.parameters_equal(net)
    assert restored.config == net.config
    assert restored.epochs_completed == 2
    assert restored.rng.bit_generator.state == net.rng.bit_generator.state


def test_corrupt_checkpoint(tmp_path):
    from psn_exceptions import DataFormatError
    path = tmp_path / "bad.npz"
    np.savez(path, format_version=np.array(99))
    with pytest.raises(DataFormatError):
        load_checkpoint(path)

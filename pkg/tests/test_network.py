"""Tests for the batch-normalised feed-forward networks."""

import math

import numpy as np
import pytest

from deep_ppde.errors import (
    ERR_CHECKPOINT,
    ERR_INVALID_PARAM,
    ERR_IO,
    ERR_SHAPE_MISMATCH,
    PPDEError,
)
from deep_ppde.network import (
    ACTIVATION_IDENTITY,
    ACTIVATION_RELU,
    ACTIVATION_TANH,
    MODE_INFERENCE,
    MODE_TRAINING,
    BatchNormConfig,
    BatchNormParams,
    LayerParams,
    NetworkParams,
    backward,
    forward,
    load_checkpoint,
    param_count,
    predict,
    save_checkpoint,
    xavier_init,
)
from deep_ppde.optimizer import AdamState, adam_step
from deep_ppde.tensor_core import RngStream


def make_params(d0=3, d1=2, l=2, m=5, activation=ACTIVATION_RELU, seed=0):
    params = xavier_init(RngStream(seed), d0, d1, l, m, activation)
    # move every parameter off its default so all gradient paths are exercised
    rng = RngStream(seed + 100)
    arrays = [a + rng.normal(a.shape, stddev=0.1) for a in params.trainable()]
    params = params.with_trainable(arrays)
    params.input_bn.running_mean = rng.normal(d0, stddev=0.2)
    params.input_bn.running_var = 1.0 + rng.uniform(0.0, 0.5, d0)
    for layer in params.layers:
        size = layer.bias.shape[0]
        layer.bn.running_mean = rng.normal(size, stddev=0.2)
        layer.bn.running_var = 1.0 + rng.uniform(0.0, 0.5, size)
    return params


def loss_of(params, inputs, sensitivity, mode):
    return float(np.sum(forward(params, inputs, mode).outputs * sensitivity))


def numeric_gradient(params, inputs, sensitivity, mode, step=1e-6):
    grads = []
    arrays = params.trainable()
    for k, array in enumerate(arrays):
        grad = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            shifted = [a.copy() for a in arrays]
            shifted[k][index] += step
            up = loss_of(params.with_trainable(shifted), inputs, sensitivity, mode)
            shifted[k][index] -= 2 * step
            down = loss_of(params.with_trainable(shifted), inputs, sensitivity, mode)
            grad[index] = (up - down) / (2 * step)
        grads.append(grad)
    return grads


def assert_gradients_close(analytic, numeric, tolerance, floor=1e-3):
    """Entry-wise relative error per parameter array; ``floor`` bounds the denominator for tiny entries."""
    assert len(analytic) == len(numeric)
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        assert a.shape == n.shape
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = float(np.max(np.abs(a - n) / scale))
        assert worst <= tolerance, f"parameter {k}: relative error {worst:.3e}"


def relu_margin(params, inputs, mode):
    cache = forward(params, inputs, mode).cache
    return min(float(np.abs(c.pre_activation).min()) for c in cache.layers if c.activation == ACTIVATION_RELU)


def inputs_away_from_kink(params, mode, margin=1e-3):
    for seed in range(100):
        inputs = RngStream(1000 + seed).normal((8, params.input_dim))
        if relu_margin(params, inputs, mode) >= margin:
            return inputs
    pytest.fail("no input batch keeps every pre-activation away from zero")


class TestInit:
    def test_weights_within_glorot_bound(self):
        params = xavier_init(RngStream(0), 4, 3, 2, 7)
        for layer in params.layers:
            fan_out, fan_in = layer.weight.shape
            assert np.abs(layer.weight).max() <= math.sqrt(6.0 / (fan_in + fan_out))
            assert not layer.bias.any()
            np.testing.assert_array_equal(layer.bn.scale, 1.0)
            np.testing.assert_array_equal(layer.bn.running_var, 1.0)

    def test_zero_input_gives_zero_output(self):
        params = xavier_init(RngStream(0), 4, 3, 2, 7)
        np.testing.assert_array_equal(predict(params, np.zeros((5, 4))), np.zeros((5, 3)))

    def test_same_seed_same_params(self):
        a = xavier_init(RngStream(4), 2, 1, 2, 5)
        b = xavier_init(RngStream(4), 2, 1, 2, 5)
        assert a.checksum() == b.checksum()

    def test_shape_properties(self):
        params = xavier_init(RngStream(0), 6, 3, 2, 13)
        assert (params.input_dim, params.output_dim, params.hidden_layers, params.width) == (6, 3, 2, 13)

    def test_invalid_activation_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            xavier_init(RngStream(0), 1, 1, 1, 1, activation="sigmoid")
        assert exc_info.value.code == ERR_INVALID_PARAM


class TestParamCount:
    def test_experiment_network(self):
        assert param_count(1, 1, 2, 11) == 166

    def test_single_hidden_layer(self):
        assert param_count(3, 2, 1, 4) == (3 + 1) * 4 + (4 + 1) * 2

    def test_smallest(self):
        assert param_count(1, 1, 1, 1) == 4

    def test_with_batch_norm(self):
        assert param_count(1, 1, 2, 11, include_bn=True) == 166 + 2 * (1 + 22 + 1)

    def test_matches_constructed_network(self):
        params = xavier_init(RngStream(0), 3, 2, 2, 5)
        dense = sum(layer.weight.size + layer.bias.size for layer in params.layers)
        assert dense == param_count(3, 2, 2, 5)
        assert sum(a.size for a in params.trainable()) == param_count(3, 2, 2, 5, include_bn=True)


class TestForward:
    def test_hand_computed_example(self):
        bn = BatchNormConfig(epsilon=1e-16)
        identity = BatchNormParams.identity
        params = NetworkParams(
            input_bn=identity(2),
            layers=[
                LayerParams(np.array([[1.0, 2.0], [3.0, -4.0]]), np.array([0.5, -1.0]), identity(2)),
                LayerParams(np.array([[1.0, -1.0]]), np.array([0.25]), identity(1)),
            ],
        )
        out = forward(params, np.array([[1.0, 1.0]]), MODE_INFERENCE, bn).outputs
        assert out[0, 0] == pytest.approx(3.75, abs=1e-12)

    def test_training_normalises_each_feature(self):
        params = make_params()
        inputs = RngStream(1).normal((64, 3), stddev=3.0)
        result = forward(params, inputs, MODE_TRAINING)
        for layer_cache in result.cache.layers:
            normalized = layer_cache.bn.normalized
            np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-10)
            np.testing.assert_allclose(normalized.var(axis=0), 1.0, atol=1e-4)

    def test_zero_scale_gives_shift(self):
        params = make_params(d1=2)
        params.layers[-1].bn.scale = np.zeros(2)
        params.layers[-1].bn.shift = np.array([0.3, -0.7])
        out = forward(params, RngStream(2).normal((5, 3)), MODE_TRAINING).outputs
        np.testing.assert_array_equal(out, np.tile([0.3, -0.7], (5, 1)))

    def test_inference_is_deterministic_and_pure(self):
        params = make_params()
        before = params.checksum()
        inputs = RngStream(3).normal((4, 3))
        a = forward(params, inputs, MODE_INFERENCE)
        b = forward(params, inputs, MODE_INFERENCE)
        np.testing.assert_array_equal(a.outputs, b.outputs)
        assert a.params is params
        assert params.checksum() == before

    def test_training_moves_running_statistics(self):
        params = xavier_init(RngStream(0), 2, 1, 1, 3)
        inputs = RngStream(1).normal((50, 2)) + 5.0
        result = forward(params, inputs, MODE_TRAINING, BatchNormConfig(momentum=0.99))
        expected = 0.01 * inputs.mean(axis=0)
        np.testing.assert_allclose(result.params.input_bn.running_mean, expected, rtol=1e-12)
        np.testing.assert_array_equal(params.input_bn.running_mean, np.zeros(2))

    def test_training_needs_two_samples(self):
        with pytest.raises(PPDEError) as exc_info:
            forward(make_params(), np.zeros((1, 3)), MODE_TRAINING)
        assert exc_info.value.code == ERR_INVALID_PARAM

    def test_input_dimension_mismatch(self):
        with pytest.raises(PPDEError) as exc_info:
            forward(make_params(), np.zeros((4, 2)), MODE_INFERENCE)
        assert exc_info.value.code == ERR_SHAPE_MISMATCH


class TestBackward:
    @pytest.mark.parametrize("activation", [ACTIVATION_RELU, ACTIVATION_TANH, ACTIVATION_IDENTITY])
    @pytest.mark.parametrize("mode", [MODE_TRAINING, MODE_INFERENCE])
    def test_matches_finite_differences(self, activation, mode):
        params = make_params(activation=activation)
        inputs = RngStream(5).normal((8, 3))
        sensitivity = RngStream(6).normal((8, 2))
        result = forward(params, inputs, mode)
        analytic = backward(params, result.cache, sensitivity)
        numeric = numeric_gradient(params, inputs, sensitivity, mode)
        assert_gradients_close(analytic, numeric, 1e-5)

    @pytest.mark.parametrize("mode", [MODE_TRAINING, MODE_INFERENCE])
    def test_relu_away_from_kink_is_tighter(self, mode):
        params = make_params(activation=ACTIVATION_RELU, seed=3)
        inputs = inputs_away_from_kink(params, mode)
        sensitivity = RngStream(7).normal((8, 2))
        analytic = backward(params, forward(params, inputs, mode).cache, sensitivity)
        numeric = numeric_gradient(params, inputs, sensitivity, mode)
        assert_gradients_close(analytic, numeric, 1e-7, floor=0.1)

    def test_zero_sensitivity_zero_gradient(self):
        params = make_params()
        result = forward(params, RngStream(0).normal((6, 3)), MODE_TRAINING)
        for grad in backward(params, result.cache, np.zeros((6, 2))):
            assert not grad.any()

    def test_cache_from_other_network_raises(self):
        small = make_params(l=1)
        big = make_params(l=2)
        result = forward(small, RngStream(0).normal((4, 3)), MODE_TRAINING)
        with pytest.raises(PPDEError) as exc_info:
            backward(big, result.cache, np.zeros((4, 2)))
        assert exc_info.value.code == ERR_INVALID_PARAM

    def test_gradient_order_matches_trainable(self):
        params = make_params()
        result = forward(params, RngStream(0).normal((6, 3)), MODE_TRAINING)
        grads = backward(params, result.cache, np.ones((6, 2)))
        assert [g.shape for g in grads] == [a.shape for a in params.trainable()]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = make_params()
        path = str(tmp_path / "net.json")
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded.checksum() == params.checksum()
        assert loaded.activation == params.activation

    def test_version_mismatch_raises(self):
        data = make_params().to_dict()
        data["version"] = 99
        with pytest.raises(PPDEError) as exc_info:
            NetworkParams.from_dict(data)
        assert exc_info.value.code == ERR_CHECKPOINT

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(PPDEError) as exc_info:
            load_checkpoint(str(tmp_path / "absent.json"))
        assert exc_info.value.code == ERR_IO

    def test_copy_is_independent(self):
        params = make_params()
        clone = params.copy()
        clone.layers[0].weight[0, 0] += 1.0
        assert clone.checksum() != params.checksum()

    def test_with_trainable_wrong_count_raises(self):
        with pytest.raises(PPDEError) as exc_info:
            make_params().with_trainable([])
        assert exc_info.value.code == ERR_SHAPE_MISMATCH


@pytest.mark.slow
class TestApproximation:
    def test_fits_cosine(self):
        inputs = np.linspace(-3.0, 3.0, 256)[:, None]
        target = np.cos(inputs)
        params = xavier_init(RngStream(0), 1, 1, 1, 64)
        state = AdamState.zeros_like(params.trainable())
        for p in range(3000):
            result = forward(params, inputs, MODE_TRAINING)
            sensitivity = 2.0 * (result.outputs - target) / len(inputs)
            grads = backward(result.params, result.cache, sensitivity)
            lr = 0.01 if p < 2000 else 0.001
            state, arrays = adam_step(state, result.params.trainable(), grads, lr)
            params = result.params.with_trainable(arrays)
        fitted = forward(params, inputs, MODE_TRAINING).outputs
        assert float(np.mean((fitted - target) ** 2)) <= 1e-3

import math

import numpy as np
import pytest

from utils.amto_errors import CompatibilityError, ConfigError, DataError, DimensionError, NonFiniteError
from utils.data_utils import BatchIterator
from utils.nn_utils import (CHECKPOINT_HEADER, Activation, InitScheme, LabeledBatch, NetworkSpec, OptimizerConfig,
                            ParamVector, decode_params, encode_params, forward, init_params, load_params,
                            loss_and_accuracy, loss_and_grad, save_params, sgd_step)


def _reference_logits(params, spec, inputs):
    """Layer-by-layer evaluation that walks the flat layout by hand."""
    flat = params.weights_and_biases
    a = np.asarray(inputs, dtype=np.float64)
    offset = 0
    shapes = list(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]))
    for index, (fan_in, fan_out) in enumerate(shapes):
        weights = np.empty((fan_in, fan_out))
        for i in range(fan_in):
            for j in range(fan_out):
                weights[i, j] = flat[offset + i * fan_out + j]
        offset += fan_in * fan_out
        biases = flat[offset:offset + fan_out]
        offset += fan_out
        z = np.array([[sum(row[i] * weights[i, j] for i in range(fan_in)) + biases[j] for j in range(fan_out)]
                      for row in a])
        if index < len(shapes) - 1:
            z = np.maximum(z, 0.0) if spec.activation is Activation.RELU else np.tanh(z)
        a = z
    return a


def _random_params(spec, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return ParamVector(scale * rng.standard_normal(spec.param_count))



######### Network spec / initialization

def test_param_count():
    assert NetworkSpec((2, 3, 2)).param_count == 17
    assert NetworkSpec((4, 16, 8, 3)).param_count == 4 * 16 + 16 + 16 * 8 + 8 + 8 * 3 + 3


@pytest.mark.parametrize("sizes", [(3,), (2, 0, 2), ()])
def test_invalid_layer_sizes(sizes):
    with pytest.raises(ConfigError):
        NetworkSpec(sizes)


def test_init_is_deterministic():
    spec = NetworkSpec((5, 12, 3), init_seed=99)
    first, second = init_params(spec), init_params(NetworkSpec((5, 12, 3), init_seed=99))
    assert first.bitwise_equal(second)
    assert not first.bitwise_equal(init_params(spec.with_seed(100)))


def test_init_biases_and_momentum_are_zero():
    spec = NetworkSpec((3, 4, 2), init_seed=1)
    params = init_params(spec)
    flat = params.weights_and_biases
    assert np.all(flat[12:16] == 0.0)
    assert np.all(flat[-2:] == 0.0)
    assert np.all(params.momentum_buffer == 0.0)


def test_he_uniform_bound():
    spec = NetworkSpec((100, 1000, 2), init_scheme=InitScheme.HE_UNIFORM, init_seed=4)
    first_layer = init_params(spec).weights_and_biases[:100 * 1000]
    bound = math.sqrt(6.0 / 100)
    assert np.all(np.abs(first_layer) <= bound)
    assert np.abs(first_layer).max() > 0.99 * bound


def test_xavier_uniform_bound():
    spec = NetworkSpec((30, 50, 2), init_scheme=InitScheme.XAVIER_UNIFORM, init_seed=4)
    first_layer = init_params(spec).weights_and_biases[:30 * 50]
    assert np.all(np.abs(first_layer) <= math.sqrt(6.0 / 80))



######### Forward

def test_zero_params_give_uniform_output_and_log_c_loss():
    spec = NetworkSpec((3, 5, 4))
    params = ParamVector(np.zeros(spec.param_count))
    inputs = np.random.default_rng(0).standard_normal((6, 3))
    probabilities = forward(params, spec, inputs)
    assert np.allclose(probabilities, 0.25, atol=0.0, rtol=0.0)
    loss, _ = loss_and_grad(params, spec, (inputs, np.array([0, 1, 2, 3, 0, 1])))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("activation", [Activation.RELU, Activation.TANH])
def test_forward_matches_reference(activation):
    spec = NetworkSpec((3, 4, 5, 2), activation=activation)
    params = _random_params(spec, seed=8)
    inputs = np.random.default_rng(9).standard_normal((7, 3))
    logits = _reference_logits(params, spec, inputs)
    expected = np.exp(logits - logits.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    probabilities = forward(params, spec, inputs)
    assert np.allclose(probabilities, expected, rtol=0.0, atol=1e-12)
    assert np.allclose(probabilities.sum(axis=1), 1.0, atol=1e-12)


def test_forward_rejects_wrong_width():
    spec = NetworkSpec((3, 4, 2))
    with pytest.raises(DimensionError):
        forward(init_params(spec), spec, np.zeros((2, 4)))


def test_forward_rejects_incompatible_params():
    spec = NetworkSpec((3, 4, 2))
    with pytest.raises(CompatibilityError):
        forward(ParamVector(np.zeros(5)), spec, np.zeros((2, 3)))



######### Loss / gradient

GRADCHECK_SPECS = [
    (3, 2, 4),
    (3, 8, 3),
    (2, 32, 2),
    (4, 16, 8, 3),
    (5, 4, 4, 4, 3),
    (3, 32, 16, 8, 2),
]


@pytest.mark.parametrize("sizes", GRADCHECK_SPECS)
@pytest.mark.parametrize("activation", [Activation.RELU, Activation.TANH])
def test_gradient_matches_central_differences(sizes, activation):
    spec = NetworkSpec(sizes, activation=activation)
    params = _random_params(spec, seed=len(sizes) * 31 + sizes[1])
    rng = np.random.default_rng(sizes[1])
    inputs = rng.standard_normal((8, sizes[0]))
    labels = rng.integers(0, sizes[-1], size=8)

    _, gradient = loss_and_grad(params, spec, (inputs, labels))
    h = 1e-5
    numeric = np.empty_like(gradient)
    for k in range(spec.param_count):
        shifted = params.weights_and_biases.copy()
        shifted[k] += h
        upper, _ = loss_and_grad(ParamVector(shifted), spec, (inputs, labels))
        shifted[k] -= 2 * h
        lower, _ = loss_and_grad(ParamVector(shifted), spec, (inputs, labels))
        numeric[k] = (upper - lower) / (2 * h)

    scale = np.maximum(np.maximum(np.abs(gradient), np.abs(numeric)), 1e-5)
    assert np.max(np.abs(gradient - numeric) / scale) < 1e-4


def test_duplicated_batch_gives_same_loss_and_gradient():
    spec = NetworkSpec((3, 6, 3), activation=Activation.TANH)
    params = _random_params(spec, seed=2)
    rng = np.random.default_rng(3)
    inputs = rng.standard_normal((10, 3))
    labels = rng.integers(0, 3, size=10)
    loss, gradient = loss_and_grad(params, spec, (inputs, labels))
    doubled_loss, doubled_gradient = loss_and_grad(params, spec, LabeledBatch(np.vstack([inputs, inputs]),
                                                                             np.concatenate([labels, labels])))
    assert doubled_loss == pytest.approx(loss, abs=1e-12)
    assert np.allclose(doubled_gradient, gradient, rtol=0.0, atol=1e-12)


def test_label_out_of_range():
    spec = NetworkSpec((2, 3, 2))
    with pytest.raises(DataError):
        loss_and_grad(init_params(spec), spec, (np.zeros((2, 2)), np.array([0, 2])))


def test_non_finite_loss_raises():
    spec = NetworkSpec((2, 3, 2))
    params = init_params(spec)
    params.weights_and_biases[0] = np.nan
    with pytest.raises(NonFiniteError):
        loss_and_grad(params, spec, (np.ones((2, 2)), np.array([0, 1])))


def test_loss_and_accuracy_ties_go_to_lowest_class():
    spec = NetworkSpec((2, 3))
    params = ParamVector(np.zeros(spec.param_count))
    loss, accuracy = loss_and_accuracy(params, spec, np.ones((4, 2)), np.array([0, 0, 1, 2]))
    assert accuracy == 0.5
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_loss_and_accuracy_does_not_modify_params():
    spec = NetworkSpec((2, 4, 2))
    params = _random_params(spec, seed=1)
    before = params.copy()
    loss_and_accuracy(params, spec, np.ones((3, 2)), np.array([0, 1, 1]))
    assert params.bitwise_equal(before)


def test_loss_and_accuracy_empty_set():
    spec = NetworkSpec((2, 2))
    with pytest.raises(DataError):
        loss_and_accuracy(init_params(spec), spec, np.zeros((0, 2)), np.zeros(0, dtype=int))



######### Optimizer

def test_learning_rate_schedule():
    optimizer = OptimizerConfig(initial_lr=0.1, lr_milestones=(2000, 7000), lr_decay=0.1)
    assert optimizer.learning_rate(0) == 0.1
    assert optimizer.learning_rate(1999) == 0.1
    assert optimizer.learning_rate(2000) == pytest.approx(0.01)
    assert optimizer.learning_rate(7000) == pytest.approx(0.001)


@pytest.mark.parametrize("kwargs", [
    {"initial_lr": -0.1},
    {"momentum": 1.0},
    {"lr_milestones": (10, 5)},
    {"lr_decay": 1.5},
    {"batch_size": 0},
])
def test_invalid_optimizer_settings(kwargs):
    with pytest.raises(ConfigError):
        OptimizerConfig(**kwargs)


def test_nesterov_step_on_quadratic():
    # f(theta) = theta^2 / 2, so the gradient is theta itself
    params = ParamVector(np.array([1.0]))
    trajectory = []
    for _ in range(3):
        params = sgd_step(params, params.weights_and_biases.copy(), lr=0.1, momentum=0.9)
        trajectory.append(float(params.weights_and_biases[0]))
    assert trajectory == pytest.approx([0.81, 0.5751, 0.327321], abs=1e-12)


def test_zero_momentum_is_plain_sgd():
    params = ParamVector(np.array([1.0, -2.0]))
    updated = sgd_step(params, np.array([0.5, 0.5]), lr=0.2, momentum=0.0)
    assert updated.weights_and_biases == pytest.approx(np.array([0.9, -2.1]), abs=1e-15)
    assert updated.momentum_buffer == pytest.approx(np.array([-0.1, -0.1]), abs=1e-15)


def test_zero_lr_and_zero_momentum_keep_params():
    params = ParamVector(np.array([0.3, 0.7]))
    updated = sgd_step(params, np.array([5.0, -5.0]), lr=0.0, momentum=0.0)
    assert updated.bitwise_equal(params)


def test_sgd_step_returns_new_vector():
    params = ParamVector(np.array([1.0, 2.0]))
    before = params.copy()
    sgd_step(params, np.array([1.0, 1.0]), lr=0.1, momentum=0.9)
    assert params.bitwise_equal(before)


def test_sgd_step_non_finite():
    with pytest.raises(NonFiniteError):
        sgd_step(ParamVector(np.array([1.0])), np.array([np.inf]), lr=0.1, momentum=0.9)


def test_sgd_step_gradient_length_mismatch():
    with pytest.raises(CompatibilityError):
        sgd_step(ParamVector(np.array([1.0])), np.array([1.0, 2.0]), lr=0.1, momentum=0.9)


def _train(spec, optimizer, dataset, steps, seed):
    params = init_params(spec)
    batches = BatchIterator(np.arange(dataset.size), optimizer.batch_size, seed)
    for step in range(steps):
        _, gradient = loss_and_grad(params, spec, batches.next_batch(dataset))
        params = sgd_step(params, gradient, optimizer.learning_rate(step), optimizer.momentum)
    return params


def test_training_is_deterministic(blobs):
    spec = NetworkSpec((2, 8, 4), init_seed=6)
    optimizer = OptimizerConfig(initial_lr=0.05, lr_milestones=(), batch_size=16)
    first = _train(spec, optimizer, blobs, 50, seed=3)
    second = _train(spec, optimizer, blobs, 50, seed=3)
    assert first.bitwise_equal(second)


def test_training_fits_separable_blobs(separable):
    spec = NetworkSpec((2, 16, 2), init_seed=1)
    optimizer = OptimizerConfig(initial_lr=0.1, momentum=0.9, lr_milestones=(), batch_size=32)
    params = _train(spec, optimizer, separable, 500, seed=2)
    loss, accuracy = loss_and_accuracy(params, spec, separable.features, separable.labels)
    assert loss < 0.1
    assert accuracy == 1.0



######### Checkpoint codec

def test_checkpoint_round_trip(tmp_path):
    spec = NetworkSpec((3, 5, 2), init_seed=2)
    params = ParamVector(_random_params(spec, 4).weights_and_biases,
                         np.random.default_rng(5).standard_normal(spec.param_count))
    path = save_params(tmp_path / "model.bin", params, spec)
    assert path.stat().st_size == CHECKPOINT_HEADER.size + 16 * spec.param_count
    assert load_params(path, spec).bitwise_equal(params)


def test_checkpoint_rejects_other_spec():
    spec = NetworkSpec((3, 5, 2))
    payload = encode_params(init_params(spec), spec)
    with pytest.raises(CompatibilityError):
        decode_params(payload, NetworkSpec((3, 6, 2)))
    with pytest.raises(CompatibilityError):
        decode_params(payload, NetworkSpec((3, 5, 2), activation=Activation.TANH))


def test_checkpoint_rejects_truncated_payload():
    spec = NetworkSpec((3, 5, 2))
    payload = encode_params(init_params(spec), spec)
    with pytest.raises(CompatibilityError):
        decode_params(payload[:-8], spec)
    with pytest.raises(CompatibilityError):
        decode_params(b"NOTAMTO!" + payload[8:], spec)

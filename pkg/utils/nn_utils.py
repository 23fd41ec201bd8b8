import hashlib
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np

from utils.amto_errors import CompatibilityError, ConfigError, DataError, DimensionError, NonFiniteError


logger = logging.getLogger(__name__)


CHECKPOINT_MAGIC = b"AMTOPV01"
CHECKPOINT_HEADER = struct.Struct("<8sQQ")



######### Network / Optimizer Definitions

class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class InitScheme(str, Enum):
    HE_UNIFORM = "he_uniform"
    XAVIER_UNIFORM = "xavier_uniform"


@dataclass(frozen=True)
class NetworkSpec:
    """
    Architecture of the fully connected classifier every task trains.

    Attributes:
        layer_sizes (Tuple[int, ...]): Input width, hidden widths..., class count.
        activation (Activation): Hidden-layer non-linearity.
        init_scheme (InitScheme): Weight initialization distribution.
        init_seed (int): Seed for the weight draw; biases always start at zero.

    Notes:
        - Two networks built from equal specs start from bitwise-identical parameters.
        - The output layer has no activation; softmax is applied by `forward`.
    """

    layer_sizes: Tuple[int, ...]
    activation: Activation = Activation.RELU
    init_scheme: InitScheme = InitScheme.HE_UNIFORM
    init_seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigError(f"layer_sizes needs at least 2 entries, got {list(sizes)}")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer_sizes entries must be >= 1, got {list(sizes)}")
        if self.init_seed < 0:
            raise ConfigError(f"init_seed must be unsigned, got {self.init_seed}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "init_scheme", InitScheme(self.init_scheme))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def class_count(self) -> int:
        return self.layer_sizes[-1]

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)

    def with_seed(self, init_seed: int) -> "NetworkSpec":
        return NetworkSpec(self.layer_sizes, self.activation, self.init_scheme, init_seed)

    def spec_hash(self) -> int:
        """
        Layout fingerprint stored in checkpoint headers.

        Returns:
            int: First 8 bytes of SHA-256 over "sizes|activation", read as little-endian uint64.
        """
        canonical = ",".join(str(s) for s in self.layer_sizes) + "|" + self.activation.value
        digest = hashlib.sha256(canonical.encode("ascii")).digest()
        return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Nesterov-momentum SGD settings shared by every task.

    Attributes:
        initial_lr (float): Learning rate before the first milestone.
        momentum (float): Momentum coefficient in [0, 1).
        lr_milestones (Tuple[int, ...]): Sorted global iterations at which the rate is decayed.
        lr_decay (float): Multiplicative decay applied at every milestone, in [0, 1];
            0 freezes training after the first milestone.
        batch_size (int): Mini-batch size.
    """

    initial_lr: float = 1e-3
    momentum: float = 0.9
    lr_milestones: Tuple[int, ...] = (2000, 7000)
    lr_decay: float = 0.1
    batch_size: int = 64

    def __post_init__(self):
        milestones = tuple(int(m) for m in self.lr_milestones)
        object.__setattr__(self, "lr_milestones", milestones)
        # lr = 0 is accepted so a stalled run can be constructed deliberately
        if not self.initial_lr >= 0.0:
            raise ConfigError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if list(milestones) != sorted(milestones):
            raise ConfigError(f"lr_milestones must be sorted, got {list(milestones)}")
        if not 0.0 <= self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in [0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")

    def learning_rate(self, iteration: int) -> float:
        """Effective rate at a global iteration: initial_lr * lr_decay ** (#milestones <= iteration)."""
        passed = sum(1 for m in self.lr_milestones if m <= iteration)
        return self.initial_lr * self.lr_decay ** passed


@dataclass
class ParamVector:
    """
    Flat parameter state of one model plus its momentum buffer.

    Layout: for every layer in order, the weight matrix (fan_in x fan_out,
    row-major) followed by the bias vector (fan_out).
    """

    weights_and_biases: np.ndarray
    momentum_buffer: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights_and_biases = np.array(self.weights_and_biases, dtype=np.float64).ravel()
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.weights_and_biases)
        else:
            self.momentum_buffer = np.array(self.momentum_buffer, dtype=np.float64).ravel()
        if self.momentum_buffer.shape != self.weights_and_biases.shape:
            raise CompatibilityError(
                f"momentum buffer length {self.momentum_buffer.size} != parameter length "
                f"{self.weights_and_biases.size}")

    def __len__(self) -> int:
        return self.weights_and_biases.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.weights_and_biases.copy(), self.momentum_buffer.copy())

    def bitwise_equal(self, other: "ParamVector") -> bool:
        return (self.weights_and_biases.tobytes() == other.weights_and_biases.tobytes()
                and self.momentum_buffer.tobytes() == other.momentum_buffer.tobytes())


class LabeledBatch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray
    indices: Optional[np.ndarray] = None



########################################################
### Parameter Helpers
############################

def layer_views(flat: np.ndarray, spec: NetworkSpec) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Splits a flat parameter (or gradient) array into per-layer (W, b) views.

    Args:
        flat (np.ndarray): Array of length spec.param_count.
        spec (NetworkSpec): Architecture defining the layout.

    Returns:
        List[Tuple[np.ndarray, np.ndarray]]: Views sharing memory with `flat`.
    """
    if flat.size != spec.param_count:
        raise CompatibilityError(f"parameter length {flat.size} does not match spec ({spec.param_count})")
    views = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        weights = flat[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        biases = flat[offset:offset + fan_out]
        offset += fan_out
        views.append((weights, biases))
    return views


def ensure_compatible(params: ParamVector, spec: NetworkSpec) -> None:
    if len(params) != spec.param_count:
        raise CompatibilityError(f"parameter length {len(params)} does not match spec ({spec.param_count})")


def init_params(spec: NetworkSpec) -> ParamVector:
    """
    Draws the initial parameters of a network.

    Weights of each layer come from U(-bound, +bound) with
    bound = sqrt(6 / fan_in) (he_uniform) or sqrt(6 / (fan_in + fan_out))
    (xavier_uniform), drawn layer by layer from one generator seeded with
    spec.init_seed. Biases and the momentum buffer are zero.

    Args:
        spec (NetworkSpec): Validated architecture.

    Returns:
        ParamVector: Fresh parameters.
    """
    rng = np.random.default_rng(spec.init_seed)
    flat = np.zeros(spec.param_count, dtype=np.float64)
    for (fan_in, fan_out), (weights, _biases) in zip(spec.layer_shapes, layer_views(flat, spec)):
        if spec.init_scheme is InitScheme.HE_UNIFORM:
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights[...] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return ParamVector(flat)



########################################################
### Forward / Backward
############################

def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_slope(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _as_inputs(batch_inputs: np.ndarray, spec: NetworkSpec) -> np.ndarray:
    inputs = np.asarray(batch_inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs.reshape(1, -1)
    if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
        raise DimensionError(f"expected inputs with {spec.input_dim} columns, got shape {inputs.shape}")
    return inputs


def _run_layers(params: ParamVector, spec: NetworkSpec, inputs: np.ndarray):
    """Returns (pre-activations, activations, logits); activations[0] is the input."""
    ensure_compatible(params, spec)
    layers = layer_views(params.weights_and_biases, spec)
    pre_activations = []
    activations = [inputs]
    a = inputs
    for index, (weights, biases) in enumerate(layers):
        z = a @ weights + biases
        if index == len(layers) - 1:
            return pre_activations, activations, z
        a = _activate(z, spec.activation)
        pre_activations.append(z)
        activations.append(a)
    raise AssertionError("unreachable")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(params: ParamVector, spec: NetworkSpec, batch_inputs: np.ndarray) -> np.ndarray:
    """
    Class probabilities for a batch of inputs.

    Args:
        params (ParamVector): Model parameters.
        spec (NetworkSpec): Architecture.
        batch_inputs (np.ndarray): (n, input_dim) matrix.

    Returns:
        np.ndarray: (n, class_count) matrix whose rows are softmax distributions.

    Raises:
        DimensionError: If the column count differs from layer_sizes[0].
    """
    inputs = _as_inputs(batch_inputs, spec)
    _, _, logits = _run_layers(params, spec, inputs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        bad = labels[(labels < 0) | (labels >= class_count)][0]
        raise DataError(f"label {bad} out of range [0, {class_count})")
    return labels.astype(np.int64)


def loss_and_grad(params: ParamVector, spec: NetworkSpec,
                  batch: Union[LabeledBatch, Tuple[np.ndarray, np.ndarray]]) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy over a labeled batch and its exact gradient.

    Args:
        params (ParamVector): Model parameters.
        spec (NetworkSpec): Architecture.
        batch: (inputs, labels) pair or LabeledBatch.

    Returns:
        Tuple[float, np.ndarray]: Batch-mean loss and a flat gradient in ParamVector layout.

    Raises:
        DataError: If a label lies outside [0, class_count).
        NonFiniteError: If the loss or the gradient is not finite.
    """
    inputs = _as_inputs(batch[0], spec)
    labels = _check_labels(batch[1], spec.class_count)
    count = inputs.shape[0]

    pre_activations, activations, logits = _run_layers(params, spec, inputs)
    log_probs = _log_softmax(logits)
    rows = np.arange(count)
    loss = float(-log_probs[rows, labels].mean())

    grad = np.zeros(spec.param_count, dtype=np.float64)
    grad_layers = layer_views(grad, spec)
    weight_layers = layer_views(params.weights_and_biases, spec)

    delta = np.exp(log_probs)
    delta[rows, labels] -= 1.0
    delta /= count
    for index in range(len(weight_layers) - 1, -1, -1):
        grad_weights, grad_biases = grad_layers[index]
        grad_weights[...] = activations[index].T @ delta
        grad_biases[...] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ weight_layers[index][0].T) * _activation_slope(
                pre_activations[index - 1], activations[index], spec.activation)

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite loss or gradient")
    return loss, grad


def loss_and_accuracy(params: ParamVector, spec: NetworkSpec,
                      inputs: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """
    Full-set mean cross-entropy and top-1 accuracy (argmax ties go to the lowest class index).
    Pure: parameters are only read.
    """
    inputs = _as_inputs(inputs, spec)
    labels = _check_labels(labels, spec.class_count)
    if inputs.shape[0] == 0:
        raise DataError("cannot evaluate on an empty set")
    _, _, logits = _run_layers(params, spec, inputs)
    log_probs = _log_softmax(logits)
    loss = float(-log_probs[np.arange(labels.size), labels].mean())
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, accuracy



########################################################
### Optimizer
############################

def sgd_step(params: ParamVector, gradient: np.ndarray, lr: float, momentum: float) -> ParamVector:
    """
    One Nesterov-momentum SGD update, returned as a new ParamVector.

    The lookahead is folded into the update:
        v     <- mu * v - lr * g
        theta <- theta + mu * v - lr * g
    (v on the right of the second line is the freshly updated buffer).
    With mu = 0 this is plain SGD.

    Raises:
        CompatibilityError: If the gradient length differs from the parameters.
        NonFiniteError: If the update produces NaN or Inf.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.weights_and_biases.shape:
        raise CompatibilityError(f"gradient length {gradient.size} != parameter length {len(params)}")
    step = lr * gradient
    velocity = momentum * params.momentum_buffer - step
    weights = params.weights_and_biases + momentum * velocity - step
    if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(velocity))):
        raise NonFiniteError("non-finite parameter update")
    return ParamVector(weights, velocity)



########################################################
### Checkpoint Codec
############################

def encode_params(params: ParamVector, spec: NetworkSpec) -> bytes:
    """
    Little-endian snapshot: header <8sQQ (magic, spec hash, length) followed by
    the weights and then the momentum buffer as float64.
    """
    ensure_compatible(params, spec)
    header = CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, spec.spec_hash(), len(params))
    body = params.weights_and_biases.astype("<f8").tobytes() + params.momentum_buffer.astype("<f8").tobytes()
    return header + body


def decode_params(payload: bytes, spec: NetworkSpec) -> ParamVector:
    if len(payload) < CHECKPOINT_HEADER.size:
        raise CompatibilityError("checkpoint is shorter than its header")
    magic, spec_hash, length = CHECKPOINT_HEADER.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise CompatibilityError(f"unknown checkpoint magic {magic!r}")
    if spec_hash != spec.spec_hash() or length != spec.param_count:
        raise CompatibilityError("checkpoint was written for a different network spec",
                                 details={"length": length, "expected": spec.param_count})
    expected = CHECKPOINT_HEADER.size + 2 * 8 * length
    if len(payload) != expected:
        raise CompatibilityError(f"checkpoint body has {len(payload)} bytes, expected {expected}")
    body = np.frombuffer(payload, dtype="<f8", offset=CHECKPOINT_HEADER.size)
    return ParamVector(body[:length].astype(np.float64), body[length:].astype(np.float64))


def save_params(path: Union[str, Path], params: ParamVector, spec: NetworkSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(params, spec))
    logger.info(f"Checkpoint written to {path}")
    return path


def load_params(path: Union[str, Path], spec: NetworkSpec) -> ParamVector:
    return decode_params(Path(path).read_bytes(), spec)

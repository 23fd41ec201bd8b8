import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedShuffleSplit

from utils.amto_errors import DataError, DimensionError
from utils.nn_utils import LabeledBatch


logger = logging.getLogger(__name__)


_MASK64 = (1 << 64) - 1



######### Seed Mixing

def derive_seed(master_seed: int, index: int) -> int:
    """
    Derives an independent 64-bit seed for item `index` from a master seed.

    Uses the splitmix64 finalizer on master_seed + (index + 1) * golden-gamma,
    so task m's seed never equals the master seed itself and neighbouring
    indices give unrelated streams.

    Args:
        master_seed (int): Run-level seed.
        index (int): Task index (or any small integer salt).

    Returns:
        int: Unsigned 64-bit seed.
    """
    z = (int(master_seed) + (int(index) + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)



######### Dataset Objects

class SyntheticKind(str, Enum):
    BLOBS = "blobs"
    TWO_MOONS = "two_moons"
    RING = "ring"


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable labeled dataset (the gross training set, or a test partition).

    Attributes:
        features (np.ndarray): (n, d) float64 matrix, read-only.
        labels (np.ndarray): (n,) int64 vector with entries in [0, class_count), read-only.
        class_count (int): Number of classes C.
        name (str): Display name used in logs and summaries.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels)
        if features.ndim != 2:
            raise DataError(f"features must be a 2-D matrix, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DataError(f"expected {features.shape[0]} labels, got shape {labels.shape}")
        if self.class_count < 1:
            raise DataError(f"class_count must be positive, got {self.class_count}")
        if features.shape[0] < self.class_count:
            raise DataError(f"dataset has {features.shape[0]} rows but {self.class_count} classes")
        if np.isnan(features).any():
            raise DataError("features contain NaN")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        labels = labels.astype(np.int64)
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices], self.class_count, name or self.name)


@dataclass(eq=False)
class SplitPair:
    """
    One task's (training set, validation set) pair as sorted index arrays into the gross set.
    """

    train_indices: np.ndarray
    val_indices: np.ndarray
    val_ratio: float
    split_seed: int

    def val_key(self) -> bytes:
        return self.val_indices.tobytes()



########################################################
### Loading / Saving
############################

def load_csv(path: Union[str, Path], label_column: int, class_count: int,
             has_header: bool = False, name: Optional[str] = None) -> Dataset:
    """
    Loads a numeric CSV file into a Dataset, keeping rows in file order.

    Args:
        path (Union[str, Path]): CSV file.
        label_column (int): Column index holding the integer label (negative counts from the end).
        class_count (int): Number of classes; every label must lie in [0, class_count).
        has_header (bool): Whether the first line is a header row.
        name (Optional[str]): Dataset name, defaults to the file stem.

    Returns:
        Dataset: The loaded dataset.

    Raises:
        DataError: Missing file, non-numeric cell (with its file row number),
                   non-integral or out-of-range label (with its row number).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")

    try:
        frame = pd.read_csv(path, header=0 if has_header else None, dtype=str,
                            skip_blank_lines=True, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"could not parse {path}: {e}")

    first_row = 2 if has_header else 1
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad_rows = numeric.isna().any(axis=1).to_numpy().nonzero()[0]
    if bad_rows.size:
        raise DataError(f"non-numeric value in {path}", details={"row": int(bad_rows[0]) + first_row})

    # correctly rounded parse of the original text
    values = frame.to_numpy(dtype=str).astype(np.float64)
    width = values.shape[1]
    if not -width <= label_column < width:
        raise DataError(f"label column {label_column} outside the {width} columns of {path}")
    label_column %= width

    raw_labels = values[:, label_column]
    for row, label in enumerate(raw_labels):
        if label != np.floor(label):
            raise DataError(f"label {label} is not an integer", details={"row": row + first_row})
        if not 0 <= label < class_count:
            raise DataError(f"label {int(label)} out of range [0, {class_count})",
                            details={"row": row + first_row})

    features = np.delete(values, label_column, axis=1)
    dataset = Dataset(features, raw_labels.astype(np.int64), class_count, name or path.stem)
    logger.info(f"Loaded {dataset.size} rows x {dataset.feature_dim} features from {path}")
    return dataset


def save_csv(dataset: Dataset, path: Union[str, Path], has_header: bool = False) -> Path:
    """Writes features followed by the label as the last column, with round-trip float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.features, columns=[f"x{i}" for i in range(dataset.feature_dim)])
    frame["label"] = dataset.labels
    frame.to_csv(path, index=False, header=has_header, float_format="%.17g")
    return path



########################################################
### Synthetic Generators
############################

def make_synthetic(kind: Union[str, SyntheticKind], n: int, class_count: int, noise_sigma: float,
                   seed: int, label_noise: float = 0.0, feature_dim: int = 2) -> Dataset:
    """
    Generates a deterministic desk-scale classification dataset.

    | kind      | classes | geometry (first two coordinates)                               |
    |-----------|---------|----------------------------------------------------------------|
    | blobs     | C >= 1  | isotropic Gaussians around centroids 2*(cos 2πk/C, sin 2πk/C)  |
    | two_moons | C == 2  | interleaved half circles (cos t, sin t) / (1-cos t, 0.5-sin t) |
    | ring      | C >= 1  | concentric circles of radius k+1, uniform angle                |

    Gaussian noise of standard deviation `noise_sigma` is added to every
    coordinate; coordinates beyond the second are pure noise. Labels are
    assigned round-robin then shuffled, so class counts differ by at most one
    (before label noise). With `label_noise = q` each label is replaced with
    probability q by a uniformly drawn different class.

    Raises:
        DataError: Unsupported kind, two_moons with C != 2, n < C, negative noise.
    """
    try:
        kind = SyntheticKind(kind)
    except ValueError:
        raise DataError(f"unsupported synthetic kind '{kind}'")
    if class_count < 1 or n < class_count:
        raise DataError(f"need n >= class_count >= 1, got n={n}, class_count={class_count}")
    if kind is SyntheticKind.TWO_MOONS and class_count != 2:
        raise DataError(f"two_moons requires class_count=2, got {class_count}")
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if not 0.0 <= label_noise < 1.0 or (label_noise > 0 and class_count < 2):
        raise DataError(f"label_noise must be in [0, 1) and needs at least 2 classes, got {label_noise}")
    if feature_dim < 2:
        raise DataError(f"feature_dim must be >= 2, got {feature_dim}")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % class_count)
    centers = np.zeros((n, feature_dim), dtype=np.float64)

    if kind is SyntheticKind.BLOBS:
        angles = 2.0 * np.pi * np.arange(class_count) / class_count
        centroids = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        centers[:, :2] = centroids[labels]
    elif kind is SyntheticKind.TWO_MOONS:
        t = rng.uniform(0.0, np.pi, size=n)
        upper = labels == 0
        centers[:, 0] = np.where(upper, np.cos(t), 1.0 - np.cos(t))
        centers[:, 1] = np.where(upper, np.sin(t), 0.5 - np.sin(t))
    else:
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        radius = labels + 1.0
        centers[:, 0] = radius * np.cos(theta)
        centers[:, 1] = radius * np.sin(theta)

    features = centers
    if noise_sigma > 0:
        features = centers + noise_sigma * rng.standard_normal((n, feature_dim))

    if label_noise > 0:
        flipped = rng.random(n) < label_noise
        shift = rng.integers(1, class_count, size=n)
        labels = np.where(flipped, (labels + shift) % class_count, labels)

    return Dataset(features, labels, class_count, f"{kind.value}-n{n}-c{class_count}-s{seed}")



########################################################
### Splitting
############################

def _split_sizes(n: int, val_ratio: float) -> Tuple[int, int]:
    """(train, val) sizes as StratifiedShuffleSplit allocates them for a float ratio."""
    val_size = int(math.ceil(val_ratio * n))
    return n - val_size, val_size


def sample_split(gross: Dataset, val_ratio: float, split_seed: int) -> SplitPair:
    """
    Randomly splits the gross set into a (train, validation) pair, stratified by class.

    |val| = ceil(val_ratio * n). Each class contributes floor or ceil of
    val_ratio * n_c samples. The draw comes from StratifiedShuffleSplit driven by
    an MT19937 generator seeded with the full 64-bit `split_seed`.

    Raises:
        DataError: val_ratio outside (0, 1), or a split the sampler cannot stratify
            (empty side, fewer rows than classes on a side, a singleton class).
    """
    if not 0.0 < val_ratio < 1.0:
        raise DataError(f"val_ratio must be in (0, 1), got {val_ratio}")

    train_size, val_size = _split_sizes(gross.size, val_ratio)
    if train_size == 0 or val_size == 0:
        raise DataError(f"val_ratio {val_ratio} leaves an empty side for n={gross.size}",
                        details={"train": train_size, "val": val_size})

    sampler = StratifiedShuffleSplit(n_splits=1, test_size=val_size, train_size=train_size,
                                     random_state=np.random.RandomState(np.random.MT19937(split_seed)))
    try:
        train_indices, val_indices = next(sampler.split(np.zeros((gross.size, 1)), gross.labels))
    except ValueError as e:
        raise DataError(f"cannot stratify n={gross.size} with val_ratio {val_ratio}: {e}",
                        details={"train": train_size, "val": val_size}) from e

    return SplitPair(np.sort(train_indices).astype(np.int64), np.sort(val_indices).astype(np.int64),
                     val_ratio, split_seed)


def partition_gross_test(dataset: Dataset, test_ratio: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Hides a stratified test partition from the orchestrator.

    Returns:
        Tuple[Dataset, Dataset]: (gross training set, test set).

    Raises:
        DataError: Either part would hold fewer rows than the dataset has classes.
    """
    gross_size, test_size = _split_sizes(dataset.size, test_ratio) if 0.0 < test_ratio < 1.0 else (0, 0)
    if min(gross_size, test_size) < dataset.class_count:
        raise DataError(f"dataset.test_ratio {test_ratio} leaves fewer rows than the {dataset.class_count} classes "
                        f"on one side of the test partition (n={dataset.size})",
                        details={"gross": gross_size, "test": test_size})
    split = sample_split(dataset, test_ratio, derive_seed(seed, 0x7E57))
    gross = dataset.subset(split.train_indices, f"{dataset.name}-gross")
    test = dataset.subset(split.val_indices, f"{dataset.name}-test")
    logger.info(f"Partitioned {dataset.name}: gross={gross.size} test={test.size}")
    return gross, test



########################################################
### Augmentation
############################

def flip_horizontal(features: np.ndarray, image_shape: Tuple[int, ...]) -> np.ndarray:
    """
    Mirrors image-shaped rows left to right.

    Args:
        features (np.ndarray): (n, H*W[*C]) matrix.
        image_shape (Tuple[int, ...]): (H, W) or (H, W, C).

    Returns:
        np.ndarray: New matrix; applying the flip twice gives back the input.
    """
    features = np.asarray(features)
    if len(image_shape) not in (2, 3) or int(np.prod(image_shape)) != features.shape[-1]:
        raise DimensionError(f"image shape {image_shape} does not match {features.shape[-1]} features")
    images = features.reshape((features.shape[0],) + tuple(image_shape))
    return images[:, :, ::-1, ...].reshape(features.shape).copy()



########################################################
### Mini-batch Iteration
############################

@dataclass(eq=False)
class BatchIterator:
    """
    Deterministic epoch-wise mini-batch stream over an index set.

    Each epoch visits a permutation of `indices` drawn from a generator seeded
    with (shuffle_seed, epoch); the last short batch of an epoch is emitted.
    When `image_shape` is set, every sample of a batch is flipped horizontally
    with probability 1/2 using a mask seeded with (shuffle_seed, epoch, cursor).
    """

    indices: np.ndarray
    batch_size: int
    shuffle_seed: int
    epoch: int = 0
    cursor: int = 0
    image_shape: Optional[Tuple[int, ...]] = None
    _orders: Dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size == 0:
            raise DataError("batch iterator needs a non-empty index set")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be positive, got {self.batch_size}")

    def epoch_order(self, epoch: int) -> np.ndarray:
        order = self._orders.get(epoch)
        if order is None:
            rng = np.random.default_rng([self.shuffle_seed, epoch])
            order = self.indices[rng.permutation(self.indices.size)]
            self._orders = {epoch: order}
        return order

    def next_batch(self, gross: Dataset) -> LabeledBatch:
        order = self.epoch_order(self.epoch)
        batch_indices = order[self.cursor:self.cursor + self.batch_size]
        inputs = gross.features[batch_indices]
        if self.image_shape is not None:
            rng = np.random.default_rng([self.shuffle_seed, self.epoch, self.cursor, 1])
            flip = rng.random(batch_indices.size) < 0.5
            if flip.any():
                inputs[flip] = flip_horizontal(inputs[flip], self.image_shape)

        self.cursor += batch_indices.size
        if self.cursor >= order.size:
            self.epoch += 1
            self.cursor = 0
        return LabeledBatch(inputs, gross.labels[batch_indices], batch_indices)

    def copy(self) -> "BatchIterator":
        return BatchIterator(self.indices, self.batch_size, self.shuffle_seed,
                             self.epoch, self.cursor, self.image_shape)


def next_batch(iterator: BatchIterator, gross: Dataset) -> LabeledBatch:
    """Draws the next batch from `iterator` (advancing it) against the gross dataset."""
    return iterator.next_batch(gross)

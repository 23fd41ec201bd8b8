import numpy as np
import pytest

from controllers.amto_controller import RunConfig, RunMode
from utils.data_utils import BatchIterator, make_synthetic, sample_split
from utils.nn_utils import NetworkSpec, OptimizerConfig, init_params
from utils.task_utils import TrainingTask
from utils.transfer_utils import RelationshipList


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    monkeypatch.delenv("AMTO_WORKERS", raising=False)
    monkeypatch.delenv("AMTO_OUTPUT_DIR", raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def blobs():
    """Four well separated classes, 400 rows."""
    return make_synthetic("blobs", 400, 4, 0.3, seed=11)


@pytest.fixture
def separable():
    """Two noiseless classes sitting exactly on (2, 0) and (-2, 0)."""
    return make_synthetic("blobs", 200, 2, 0.0, seed=5)


@pytest.fixture
def small_spec():
    return NetworkSpec((2, 8, 4), init_seed=3)


@pytest.fixture
def fast_optimizer():
    return OptimizerConfig(initial_lr=0.05, momentum=0.9, lr_milestones=(), lr_decay=0.1, batch_size=32)


def make_task(gross, spec, optimizer, task_id=0, task_count=2, patience=3, split_seed=7, keep_best=False):
    split = sample_split(gross, 0.1, split_seed)
    params = init_params(spec)
    return TrainingTask(
        task_id=task_id,
        spec=spec,
        optimizer=optimizer,
        split=split,
        master_params=params,
        slave_params=params.copy(),
        rl=RelationshipList.zeros(task_count, task_id),
        master_batches=BatchIterator(split.train_indices, optimizer.batch_size, split_seed + 1),
        slave_batches=BatchIterator(split.train_indices, optimizer.batch_size, split_seed + 2),
        patience=patience,
        keep_best=keep_best,
        trained_mask=np.zeros(gross.size, dtype=bool),
    )


@pytest.fixture
def task_factory(blobs, small_spec, fast_optimizer):
    def factory(**kwargs):
        return make_task(kwargs.pop("gross", blobs), kwargs.pop("spec", small_spec),
                         kwargs.pop("optimizer", fast_optimizer), **kwargs)
    return factory


def make_config(spec, optimizer, **kwargs) -> RunConfig:
    defaults = dict(task_count=3, checkpoint_interval=20, max_iterations=200, patience=5, val_ratio=0.1,
                    master_seed=42, network=spec, optimizer=optimizer, mode=RunMode.AMTO)
    defaults.update(kwargs)
    return RunConfig(**defaults)


@pytest.fixture
def config_factory(small_spec, fast_optimizer):
    def factory(**kwargs):
        return make_config(kwargs.pop("network", small_spec), kwargs.pop("optimizer", fast_optimizer), **kwargs)
    return factory

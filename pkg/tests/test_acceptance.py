import pytest

from controllers.experiment_controller import ExperimentController
from helpers.config import ExperimentSpecFile


pytestmark = pytest.mark.slow


COMMON = """
model.hidden = 32
optimizer.lr = 0.05
optimizer.milestones = 2000
optimizer.batch_size = 64
amto.tasks = 4
amto.checkpoint_interval = 100
amto.patience = 10
run.max_iterations = 3000
run.seed = 100
"""

NOISY_MOONS = """
dataset.kind = two_moons
dataset.class_count = 2
dataset.samples = 1500
dataset.noise = 0.15
dataset.label_noise = 0.15
"""

OVERLAPPING_BLOBS = """
dataset.kind = blobs
dataset.class_count = 4
dataset.samples = 1500
dataset.noise = 1.0
"""


@pytest.mark.parametrize("dataset", [NOISY_MOONS, OVERLAPPING_BLOBS], ids=["noisy-moons", "overlapping-blobs"])
def test_amto_is_not_worse_than_sto(tmp_path, dataset):
    spec_file = ExperimentSpecFile.parse(COMMON + dataset)
    table = ExperimentController(spec_file, tmp_path).cmd_compare(repeats=10)
    mean = table[table["seed"] == "mean"].iloc[0]
    assert mean["amto_accuracy"] >= mean["sto_accuracy"] - 0.5


def test_more_tasks_lower_the_winner_validation_loss(tmp_path):
    spec_file = ExperimentSpecFile.parse(COMMON + OVERLAPPING_BLOBS)
    sweep = ExperimentController(spec_file, tmp_path).cmd_sweep_tasks([1, 2, 4, 6], repeats=5)
    losses = dict(zip(sweep["task_count"], sweep["mean_val_loss"]))
    assert losses[4] <= losses[1]

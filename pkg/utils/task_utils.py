import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from utils.amto_errors import ConfigError, DataError, NonFiniteError
from utils.data_utils import BatchIterator, Dataset, SplitPair
from utils.nn_utils import (NetworkSpec, OptimizerConfig, ParamVector, loss_and_accuracy, loss_and_grad,
                            sgd_step)
from utils.transfer_utils import RelationshipList


logger = logging.getLogger(__name__)


MASTER = "master"
SLAVE = "slave"



######### Task Objects

@dataclass(eq=False)
class TrainingTask:
    """
    One formulated training task: a computing unit holding a master and a slave model.

    Attributes:
        task_id (int): Task index m in [0, M).
        spec (NetworkSpec): Shared architecture.
        optimizer (OptimizerConfig): Shared optimizer settings.
        split (SplitPair): This task's (train, validation) index pair.
        master_params (ParamVector): theta_m.
        slave_params (ParamVector): Temporary model; meaningful only while `slave_active`.
        rl (RelationshipList): Affinities towards the other tasks.
        master_batches (BatchIterator): Batch stream over split.train_indices for the master.
        slave_batches (BatchIterator): Batch stream over split.train_indices for the slave.
        patience (int): Limit p of consecutive non-improving checkpoints.
        best_val_loss (float): Lowest master validation loss seen so far.
        patience_counter (int): Consecutive non-improving checkpoints, at most p.
        iteration (int): Global training iteration counter driving the LR schedule.
    """

    task_id: int
    spec: NetworkSpec
    optimizer: OptimizerConfig
    split: SplitPair
    master_params: ParamVector
    slave_params: ParamVector
    rl: RelationshipList
    master_batches: BatchIterator
    slave_batches: BatchIterator
    patience: int
    keep_best: bool = False
    best_val_loss: float = math.inf
    patience_counter: int = 0
    iteration: int = 0
    master_steps: int = 0
    slave_steps: int = 0
    slave_active: bool = False
    slave_source: Optional[int] = None
    best_params: Optional[ParamVector] = None
    last_train_loss: float = math.nan
    trained_mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if len(self.slave_params) != len(self.master_params):
            raise ConfigError(f"task {self.task_id}: master and slave layouts differ")

    @property
    def stalled(self) -> bool:
        return self.patience_counter >= self.patience

    def final_params(self) -> ParamVector:
        """Master at termination, or the best-validation copy when `keep_best` is on."""
        if self.keep_best and self.best_params is not None:
            return self.best_params
        return self.master_params


@dataclass(frozen=True)
class ValidationReport:
    """
    Validation-set losses and accuracies of a task's master and slave at one checkpoint.
    Slave fields are None when no slave was trained this round.
    """

    task_id: int
    checkpoint: int
    master_val_loss: float
    slave_val_loss: Optional[float]
    master_val_accuracy: float
    slave_val_accuracy: Optional[float]

    def after_transfer(self, accepted: bool) -> "ValidationReport":
        """The report as seen by the master once an accepted slave has replaced it."""
        if not accepted:
            return self
        return replace(self, master_val_loss=self.slave_val_loss, master_val_accuracy=self.slave_val_accuracy)


class UnitResult(NamedTuple):
    params: ParamVector
    batches: BatchIterator
    mean_loss: float
    used_indices: np.ndarray



########################################################
### Training
############################

def train_unit(params: ParamVector, batches: BatchIterator, gross: Dataset, spec: NetworkSpec,
               optimizer: OptimizerConfig, c: int, iteration_offset: int,
               task_id: Optional[int] = None) -> UnitResult:
    """
    Advances one model by exactly `c` SGD steps.

    Works on copies of the parameters and the batch iterator, so it can run in
    any worker thread; the caller merges the returned state. The rate of step
    s is optimizer.learning_rate(iteration_offset + s).

    Raises:
        NonFiniteError: Tagged with the task id and global iteration.
    """
    if c < 1:
        raise ConfigError(f"c must be >= 1, got {c}")
    batches = batches.copy()
    losses = np.empty(c, dtype=np.float64)
    used = []
    for step in range(c):
        iteration = iteration_offset + step
        batch = batches.next_batch(gross)
        try:
            losses[step], gradient = loss_and_grad(params, spec, batch)
            params = sgd_step(params, gradient, optimizer.learning_rate(iteration), optimizer.momentum)
        except NonFiniteError as e:
            raise NonFiniteError(f"{e.message} in task {task_id} at iteration {iteration}",
                                 task_id=task_id, iteration=iteration)
        used.append(batch.indices)
    return UnitResult(params, batches, float(losses.mean()), np.unique(np.concatenate(used)))


def unit_jobs(task: TrainingTask, gross: Dataset, c: int,
              iteration_offset: Optional[int] = None) -> List[Tuple[str, Callable[[], UnitResult]]]:
    """
    Training closures of a task's computing unit for one round: the master, plus the slave when active.
    """
    offset = task.iteration if iteration_offset is None else iteration_offset
    jobs = [(MASTER, lambda: train_unit(task.master_params, task.master_batches, gross, task.spec,
                                        task.optimizer, c, offset, task.task_id))]
    if task.slave_active:
        jobs.append((SLAVE, lambda: train_unit(task.slave_params, task.slave_batches, gross, task.spec,
                                               task.optimizer, c, offset, task.task_id)))
    return jobs


def apply_unit_result(task: TrainingTask, role: str, result: UnitResult, c: int) -> TrainingTask:
    if role == MASTER:
        task.master_params = result.params
        task.master_batches = result.batches
        task.master_steps += c
        task.last_train_loss = result.mean_loss
    else:
        task.slave_params = result.params
        task.slave_batches = result.batches
        task.slave_steps += c
    if task.trained_mask is not None:
        task.trained_mask[result.used_indices] = True
    return task


def finish_round(task: TrainingTask, c: int) -> TrainingTask:
    task.iteration += c
    return task


def train_c_iterations(task: TrainingTask, gross: Dataset, c: int,
                       iteration_offset: Optional[int] = None) -> TrainingTask:
    """
    Trains the master (and the slave, when one was reallocated) for c iterations on D^t_m.

    Args:
        task (TrainingTask): Task to advance in place.
        gross (Dataset): Gross training set the split indexes into.
        c (int): Number of SGD steps per model.
        iteration_offset (Optional[int]): Global iteration of the first step; defaults to task.iteration.

    Returns:
        TrainingTask: The same task, advanced.
    """
    for role, job in unit_jobs(task, gross, c, iteration_offset):
        apply_unit_result(task, role, job(), c)
    return finish_round(task, c)



########################################################
### Validation / Patience
############################

def evaluate_validation(task: TrainingTask, gross: Dataset, checkpoint: int = 0) -> ValidationReport:
    """
    Mean cross-entropy and top-1 accuracy of master and slave on D^v_m.

    Parameters are only read.

    Raises:
        DataError: If the validation set is empty.
    """
    if task.split.val_indices.size == 0:
        raise DataError(f"task {task.task_id} has an empty validation set")
    inputs = gross.features[task.split.val_indices]
    labels = gross.labels[task.split.val_indices]
    master_loss, master_accuracy = loss_and_accuracy(task.master_params, task.spec, inputs, labels)
    slave_loss = slave_accuracy = None
    if task.slave_active:
        slave_loss, slave_accuracy = loss_and_accuracy(task.slave_params, task.spec, inputs, labels)
    return ValidationReport(task.task_id, checkpoint, master_loss, slave_loss, master_accuracy, slave_accuracy)


def update_patience(task: TrainingTask, report: ValidationReport) -> Tuple[TrainingTask, bool]:
    """
    Early-stopping bookkeeping on the master's validation loss.

    A strict decrease below best_val_loss resets the counter (and, with
    keep_best, snapshots the master); anything else increments it, capped at p.

    Returns:
        Tuple[TrainingTask, bool]: The task and whether it has now stalled.
    """
    if report.task_id != task.task_id:
        raise ConfigError(f"report of task {report.task_id} applied to task {task.task_id}")
    if report.master_val_loss < task.best_val_loss:
        task.best_val_loss = report.master_val_loss
        task.patience_counter = 0
        if task.keep_best:
            task.best_params = task.master_params.copy()
    else:
        task.patience_counter = min(task.patience_counter + 1, task.patience)
    return task, task.stalled

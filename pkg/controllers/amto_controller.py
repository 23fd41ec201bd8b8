import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.amto_errors import AmtoError, ConfigError, DataError, DimensionError, WorkerError
from utils.data_utils import BatchIterator, Dataset, SplitPair, derive_seed, sample_split
from utils.nn_utils import NetworkSpec, OptimizerConfig, ParamVector, init_params, loss_and_accuracy
from utils.task_utils import (TrainingTask, UnitResult, ValidationReport, apply_unit_result, evaluate_validation,
                              finish_round, unit_jobs, update_patience)
from utils.transfer_utils import (RelationshipList, TransferEvent, determine_transfer, reallocate_knowledge,
                                  select_source, update_relationship)


logger = logging.getLogger(__name__)


# salts fed to derive_seed next to the run seed
SELECTION_SALT = 0x5E1EC7
MASTER_STREAM_SALT = 1
SLAVE_STREAM_SALT = 2


class RunMode(str, Enum):
    STO_NO_VAL = "sto_no_val"
    STO_WITH_VAL = "sto_with_val"
    AMTO = "amto"


class EarlyStopPolicy(str, Enum):
    ALL = "all"
    ANY = "any"


class StopReason(str, Enum):
    MAX_ITER = "max_iter"
    EARLY_STOP = "early_stop"


METRICS_COLUMNS = [
    "run_id", "seed", "task_id", "checkpoint", "global_iteration", "train_loss", "master_val_loss",
    "slave_val_loss", "val_accuracy", "lr", "transfer_source", "transfer_accepted",
]



######### Run Configuration / Result Objects

@dataclass
class RunConfig:
    """
    Settings of one training run.

    Attributes:
        task_count (int): Number of formulated tasks M (must be 1 for the STO modes).
        checkpoint_interval (int): Iterations c between checkpoints.
        max_iterations (int): Per-task master iteration budget, rounded down to a multiple of c.
        patience (int): Early-stopping patience p.
        val_ratio (float): Validation share of every split.
        master_seed (int): Seed every per-task seed is derived from.
        network (NetworkSpec): Shared architecture; its init_seed is the shared initialization seed.
        optimizer (OptimizerConfig): Shared optimizer settings.
        mode (RunMode): sto_no_val, sto_with_val or amto.
        early_stop_policy (EarlyStopPolicy): Stop when all tasks stalled (default) or when any did.
        keep_best (bool): Select among best-validation snapshots instead of final masters
            (always on for a validated single-task run).
        shared_init (bool): All tasks start from identical parameters (default) or from per-task seeds.
        workers (int): Thread pool size for the per-round training closures.
        image_shape (Optional[Tuple[int, ...]]): Enables random horizontal flips of training batches.
        run_id (str): Identifier written into every metrics row.
        dataset_name (str): Informational.
    """

    task_count: int = 4
    checkpoint_interval: int = 100
    max_iterations: int = 10000
    patience: int = 10
    val_ratio: float = 0.1
    master_seed: int = 0
    network: NetworkSpec = field(default_factory=lambda: NetworkSpec((2, 32, 2)))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: RunMode = RunMode.AMTO
    early_stop_policy: EarlyStopPolicy = EarlyStopPolicy.ALL
    keep_best: bool = False
    shared_init: bool = True
    workers: int = 1
    image_shape: Optional[Tuple[int, ...]] = None
    run_id: str = ""
    dataset_name: str = ""

    def __post_init__(self):
        self.mode = RunMode(self.mode)
        self.early_stop_policy = EarlyStopPolicy(self.early_stop_policy)
        if self.task_count < 1:
            raise ConfigError(f"task_count must be >= 1, got {self.task_count}")
        if self.mode is not RunMode.AMTO and self.task_count != 1:
            raise ConfigError(f"mode {self.mode.value} trains a single task, got task_count={self.task_count}")
        if self.checkpoint_interval < 1:
            raise ConfigError(f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}")
        if self.max_iterations < self.checkpoint_interval:
            raise ConfigError(f"max_iterations ({self.max_iterations}) is below one checkpoint interval "
                              f"({self.checkpoint_interval})")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_ratio < 1.0:
            raise ConfigError(f"val_ratio must be in (0, 1), got {self.val_ratio}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        rounded = self.max_iterations - self.max_iterations % self.checkpoint_interval
        if rounded != self.max_iterations:
            logger.warning(f"max_iterations {self.max_iterations} rounded down to {rounded} "
                           f"(multiple of checkpoint interval {self.checkpoint_interval})")
            self.max_iterations = rounded
        if not self.run_id:
            self.run_id = f"m{self.task_count}-s{self.master_seed}"

    @property
    def round_count(self) -> int:
        return self.max_iterations // self.checkpoint_interval

    @property
    def transfers_active(self) -> bool:
        return self.mode is RunMode.AMTO and self.task_count >= 2

    @property
    def retains_best(self) -> bool:
        """A validated single-task run always ends on its lowest validation loss checkpoint."""
        if self.mode is RunMode.STO_NO_VAL:
            return False
        return self.keep_best or self.task_count == 1



@dataclass
class MetricsRow:
    run_id: str
    seed: int
    task_id: int
    checkpoint: int
    global_iteration: int
    train_loss: float
    master_val_loss: Optional[float]
    slave_val_loss: Optional[float]
    val_accuracy: Optional[float]
    lr: float
    transfer_source: Optional[int]
    transfer_accepted: Optional[bool]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunResult:
    """
    Outcome of a run.

    Attributes:
        winner (int): Task id with the highest harmonic accuracy (lowest id on ties).
        winner_params (ParamVector): The winning model.
        accuracy_matrix (np.ndarray): A[i, k] = accuracy of task i's model on validation set k.
        loss_matrix (np.ndarray): Same layout, mean cross-entropy.
        harmonic_accuracies (List[float]): Per-task harmonic accuracy over the M validation sets.
        stop_reason (StopReason): max_iter or early_stop.
        rounds (int): Checkpoint rounds executed.
        metrics (List[MetricsRow]): Ordered by (checkpoint, task id).
        events (List[TransferEvent]): Ordered by (checkpoint, receiver).
        tasks (List[TrainingTask]): Final task states.
    """

    run_id: str
    mode: RunMode
    seed: int
    winner: int
    winner_params: ParamVector
    accuracy_matrix: np.ndarray
    loss_matrix: np.ndarray
    harmonic_accuracies: List[float]
    stop_reason: StopReason
    rounds: int
    metrics: List[MetricsRow]
    events: List[TransferEvent]
    tasks: List[TrainingTask]
    wall_time_seconds: float = 0.0

    @property
    def winner_val_loss(self) -> Optional[float]:
        if self.loss_matrix.size == 0:
            return None
        return float(self.loss_matrix[self.winner, self.winner])



########################################################
### Harmonic Accuracy
############################

def harmonic_accuracy(accuracies: Sequence[float]) -> float:
    """
    Harmonic mean M / sum(1 / A_m) of one model's accuracies over the M validation sets.

    A zero entry gives 0 (the limit of the harmonic mean); a constant vector
    returns that constant exactly.

    Raises:
        DataError: Empty input or an entry outside [0, 1].
    """
    values = np.asarray(accuracies, dtype=np.float64)
    if values.size == 0:
        raise DataError("harmonic accuracy of an empty vector")
    if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
        raise DataError(f"accuracies must lie in [0, 1], got {values.tolist()}")
    if np.any(values == 0.0):
        return 0.0
    if np.all(values == values[0]):
        return float(values[0])
    return values.size / math.fsum(1.0 / values)



######### AMTO Controller

class AmtoController:
    """
    Runs the adaptive multi-task training loop for one RunConfig.

    Each checkpoint round runs four phases in a fixed order:
        1. snapshot every master,
        2. every task (by id) draws a source and loads its snapshot into the slave,
        3. all master/slave training closures run on the worker pool,
        4. by task id: validation, determining transfer, relationship and patience updates.
    Only phase 3 is parallel and it touches no shared state, so every artifact
    is independent of the pool size.
    """

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.logger = logging.getLogger(self.__class__.__name__)
        self.logger.info(f"AmtoController initialized ({config.run_id}, mode={config.mode.value}, "
                         f"M={config.task_count}, c={config.checkpoint_interval}, "
                         f"max_iterations={config.max_iterations}, workers={config.workers})")



    ########################################################
    ### Task Formulation
    ############################

    def formulate_tasks(self, gross: Dataset) -> List[TrainingTask]:
        """
        Builds the M training tasks from the gross training set.

        Task m gets the split seed derive_seed(master_seed, m), batch streams
        seeded from that split seed, zeroed relationships and either the shared
        initial parameters or its own derived initialization.

        Raises:
            DimensionError: Network input width differs from the dataset.
            ConfigError: Network has fewer outputs than the dataset has classes.
            DataError: Dataset too small for the split.
        """
        config = self.config
        spec = config.network
        if spec.input_dim != gross.feature_dim:
            raise DimensionError(f"network expects {spec.input_dim} features, dataset has {gross.feature_dim}")
        if spec.class_count < gross.class_count:
            raise ConfigError(f"network has {spec.class_count} outputs for {gross.class_count} classes")

        shared = init_params(spec)
        tasks = []
        for m in range(config.task_count):
            split_seed = derive_seed(config.master_seed, m)
            if config.mode is RunMode.STO_NO_VAL:
                split = SplitPair(np.arange(gross.size, dtype=np.int64), np.empty(0, dtype=np.int64),
                                  0.0, split_seed)
            else:
                split = sample_split(gross, config.val_ratio, split_seed)

            params = shared.copy() if config.shared_init else init_params(spec.with_seed(derive_seed(spec.init_seed, m)))
            batch_size = config.optimizer.batch_size
            tasks.append(TrainingTask(
                task_id=m,
                spec=spec,
                optimizer=config.optimizer,
                split=split,
                master_params=params,
                slave_params=params.copy(),
                rl=RelationshipList.zeros(config.task_count, m),
                master_batches=BatchIterator(split.train_indices, batch_size,
                                             derive_seed(split_seed, MASTER_STREAM_SALT),
                                             image_shape=config.image_shape),
                slave_batches=BatchIterator(split.train_indices, batch_size,
                                            derive_seed(split_seed, SLAVE_STREAM_SALT),
                                            image_shape=config.image_shape),
                patience=config.patience,
                keep_best=config.retains_best,
                trained_mask=np.zeros(gross.size, dtype=bool),
            ))
            self.logger.info(f"Task {m}: |train|={split.train_indices.size} |val|={split.val_indices.size} "
                             f"split_seed={split_seed}")

        val_keys = {t.split.val_key() for t in tasks}
        if config.mode is not RunMode.STO_NO_VAL and len(val_keys) < len(tasks):
            self.logger.warning("Some formulated tasks share an identical validation set")
        return tasks



    ########################################################
    ### Training Loop
    ############################

    def _execute(self, pool: Optional[ThreadPoolExecutor],
                 jobs: List[Tuple[TrainingTask, str, Callable[[], UnitResult]]]) -> List[UnitResult]:
        """Runs the training closures and returns their results in submission order."""
        if pool is None:
            futures = None
        else:
            futures = [pool.submit(job) for _, _, job in jobs]

        results = []
        for index, (task, role, job) in enumerate(jobs):
            try:
                results.append(job() if futures is None else futures[index].result())
            except AmtoError:
                raise
            except Exception as e:
                raise WorkerError(task.task_id, role, e) from e
        return results

    def _early_stop(self, tasks: List[TrainingTask]) -> bool:
        stalled = [t.stalled for t in tasks]
        if self.config.early_stop_policy is EarlyStopPolicy.ANY:
            return any(stalled)
        return all(stalled)

    def run(self, gross: Dataset) -> RunResult:
        """
        Executes the whole run and selects the final model.

        Returns:
            RunResult: Winner, accuracy matrix, metrics and transfer logs.

        Raises:
            NonFiniteError: A loss or update became non-finite (aborts the run).
            WorkerError: A training closure failed for another reason.
        """
        config = self.config
        started = time.perf_counter()
        tasks = self.formulate_tasks(gross)
        c = config.checkpoint_interval
        selection_rng = np.random.default_rng(derive_seed(config.master_seed, SELECTION_SALT))
        validating = config.mode is not RunMode.STO_NO_VAL

        metrics: List[MetricsRow] = []
        events: List[TransferEvent] = []
        stop_reason = StopReason.MAX_ITER
        rounds = 0

        pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
        try:
            for checkpoint in range(1, config.round_count + 1):
                rounds = checkpoint

                # knowledge reallocation against snapshots taken at this barrier
                if config.transfers_active:
                    snapshots = [t.master_params.copy() for t in tasks]
                    for task in tasks:
                        source = select_source(task.rl, selection_rng)
                        reallocate_knowledge(task, snapshots[source], source)

                jobs = [(task, role, job) for task in tasks for role, job in unit_jobs(task, gross, c)]
                for (task, role, _), result in zip(jobs, self._execute(pool, jobs)):
                    apply_unit_result(task, role, result, c)
                for task in tasks:
                    finish_round(task, c)

                accepted_count = 0
                for task in tasks:
                    lr = config.optimizer.learning_rate(task.iteration - 1)
                    if not validating:
                        metrics.append(MetricsRow(config.run_id, config.master_seed, task.task_id, checkpoint,
                                                  task.iteration, task.last_train_loss, None, None, None, lr,
                                                  None, None))
                        continue

                    report = evaluate_validation(task, gross, checkpoint)
                    event = None
                    if config.transfers_active:
                        task, event = determine_transfer(task, report)
                        update_relationship(task.rl, event.source, event.master_val_loss, event.slave_val_loss)
                        events.append(event)
                        accepted_count += int(event.accepted)
                    task, _ = update_patience(task, report.after_transfer(event is not None and event.accepted))
                    metrics.append(self._metrics_row(task, report, event, checkpoint, lr))

                self.logger.info(f"Round {checkpoint}/{config.round_count}: accepted={accepted_count} "
                                 f"stalled={sum(t.stalled for t in tasks)}/{len(tasks)}")
                if validating and self._early_stop(tasks):
                    stop_reason = StopReason.EARLY_STOP
                    break
        finally:
            if pool is not None:
                pool.shutdown(wait=True)

        self.logger.info(f"Run {config.run_id} stopped after {rounds} rounds ({stop_reason.value})")
        accuracy_matrix, loss_matrix, harmonic, winner = self.select_winner(tasks, gross)
        result = RunResult(
            run_id=config.run_id,
            mode=config.mode,
            seed=config.master_seed,
            winner=winner,
            winner_params=tasks[winner].final_params().copy(),
            accuracy_matrix=accuracy_matrix,
            loss_matrix=loss_matrix,
            harmonic_accuracies=harmonic,
            stop_reason=stop_reason,
            rounds=rounds,
            metrics=metrics,
            events=events,
            tasks=tasks,
            wall_time_seconds=time.perf_counter() - started,
        )
        self.logger.info(f"Winner: task {winner} (harmonic accuracies {[round(h, 4) for h in harmonic]})")
        return result

    def _metrics_row(self, task: TrainingTask, report: ValidationReport, event: Optional[TransferEvent],
                     checkpoint: int, lr: float) -> MetricsRow:
        return MetricsRow(
            run_id=self.config.run_id,
            seed=self.config.master_seed,
            task_id=task.task_id,
            checkpoint=checkpoint,
            global_iteration=task.iteration,
            train_loss=task.last_train_loss,
            master_val_loss=report.master_val_loss,
            slave_val_loss=report.slave_val_loss,
            val_accuracy=report.master_val_accuracy,
            lr=lr,
            transfer_source=event.source if event is not None else None,
            transfer_accepted=event.accepted if event is not None else None,
        )



    ########################################################
    ### Final Model Selection
    ############################

    def select_winner(self, tasks: List[TrainingTask],
                      gross: Dataset) -> Tuple[np.ndarray, np.ndarray, List[float], int]:
        """
        Evaluates every task's final model on every validation set and picks the best harmonic accuracy.

        Returns:
            Tuple[np.ndarray, np.ndarray, List[float], int]:
                accuracy matrix A (M x M), loss matrix, harmonic accuracies, winner id.
                Without validation sets (sto_no_val) the matrices are empty and task 0 wins.
        """
        if any(t.split.val_indices.size == 0 for t in tasks):
            return np.empty((0, 0)), np.empty((0, 0)), [], 0

        count = len(tasks)
        accuracy_matrix = np.zeros((count, count), dtype=np.float64)
        loss_matrix = np.zeros((count, count), dtype=np.float64)
        for i, task in enumerate(tasks):
            params = task.final_params()
            for k, target in enumerate(tasks):
                inputs = gross.features[target.split.val_indices]
                labels = gross.labels[target.split.val_indices]
                loss_matrix[i, k], accuracy_matrix[i, k] = loss_and_accuracy(params, task.spec, inputs, labels)

        harmonic = [harmonic_accuracy(row) for row in accuracy_matrix]
        winner = int(np.argmax(harmonic))
        return accuracy_matrix, loss_matrix, harmonic, winner



########################################################
### Module-level Entry Points
############################

def formulate_tasks(gross: Dataset, config: RunConfig) -> List[TrainingTask]:
    return AmtoController(config).formulate_tasks(gross)


def run(gross: Dataset, config: RunConfig) -> RunResult:
    return AmtoController(config).run(gross)


def select_winner(tasks: List[TrainingTask], gross: Dataset) -> Tuple[np.ndarray, np.ndarray, List[float], int]:
    if not tasks:
        raise ConfigError("no tasks to select from")
    config = RunConfig(task_count=len(tasks), network=tasks[0].spec, optimizer=tasks[0].optimizer,
                       checkpoint_interval=1, max_iterations=1)
    return AmtoController(config).select_winner(tasks, gross)

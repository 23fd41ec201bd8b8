import logging
import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Any, Dict, Tuple

import numpy as np

from utils.amto_errors import CompatibilityError, ConfigError, NonFiniteError
from utils.nn_utils import ParamVector

if TYPE_CHECKING:
    from utils.task_utils import TrainingTask, ValidationReport


logger = logging.getLogger(__name__)


_BELOW_ONE = math.nextafter(1.0, 0.0)



######### Relationship List

@dataclass(eq=False)
class RelationshipList:
    """
    Per-task affinities r_j of task `owner` towards every other task j.

    Attributes:
        r (np.ndarray): Length-M float64 vector, all zeros at run start.
        owner (int): Task id m; r[m] is never read or written.
    """

    r: np.ndarray
    owner: int

    @classmethod
    def zeros(cls, task_count: int, owner: int) -> "RelationshipList":
        if not 0 <= owner < task_count:
            raise ConfigError(f"owner {owner} outside [0, {task_count})")
        return cls(np.zeros(task_count, dtype=np.float64), owner)

    def __post_init__(self):
        self.r = np.array(self.r, dtype=np.float64)
        if not np.all(np.isfinite(self.r)):
            raise NonFiniteError("relationship list entries must be finite", task_id=self.owner)

    @property
    def task_count(self) -> int:
        return self.r.size

    def sources(self) -> np.ndarray:
        """Candidate source ids in ascending order (every id except the owner)."""
        return np.array([j for j in range(self.task_count) if j != self.owner], dtype=np.int64)

    def copy(self) -> "RelationshipList":
        return RelationshipList(self.r.copy(), self.owner)


@dataclass(frozen=True)
class TransferEvent:
    """
    Outcome of one knowledge reallocation round for one receiver.

    Invariants:
        accepted == (slave_val_loss < master_val_loss)
        rl_increment == tanh(master_val_loss - slave_val_loss)
    """

    checkpoint: int
    receiver: int
    source: int
    master_val_loss: float
    slave_val_loss: float
    accepted: bool
    rl_increment: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)



########################################################
### Source Selection
############################

def selection_probabilities(rl: RelationshipList) -> np.ndarray:
    """
    Softmax over the non-self relationship entries.

    p_j = exp(r_j) / sum_{k != m} exp(r_k), evaluated after subtracting the
    largest non-self entry.

    Returns:
        np.ndarray: Length M-1 probabilities, aligned with `rl.sources()`.

    Raises:
        ConfigError: If fewer than two tasks exist.
    """
    if rl.task_count < 2:
        raise ConfigError(f"source selection needs at least 2 tasks, got {rl.task_count}")
    logits = rl.r[rl.sources()]
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def select_source(rl: RelationshipList, rng: np.random.Generator) -> int:
    """
    Draws one source task id j != owner from the selection probabilities.

    Consumes exactly one uniform draw from `rng`, so a fixed generator state
    gives a fixed sequence of selections.
    """
    probabilities = selection_probabilities(rl)
    sources = rl.sources()
    u = rng.random()
    position = int(np.searchsorted(np.cumsum(probabilities), u, side="right"))
    return int(sources[min(position, sources.size - 1)])



########################################################
### Knowledge Reallocation / Determining Transfer
############################

def reallocate_knowledge(task: "TrainingTask", source_params: ParamVector, source_id: int = -1) -> "TrainingTask":
    """
    Loads a copy of the source master's weights into the receiver's slave slot.

    The slave's momentum buffer is zeroed; the receiver's master and the
    source's parameters are left untouched.

    Raises:
        CompatibilityError: If the source layout differs from the receiver's.
    """
    if len(source_params) != len(task.master_params):
        raise CompatibilityError(
            f"source parameters ({len(source_params)}) incompatible with task {task.task_id} "
            f"({len(task.master_params)})")
    task.slave_params = ParamVector(source_params.weights_and_biases.copy())
    task.slave_source = source_id
    task.slave_active = True
    return task


def determine_transfer(task: "TrainingTask", report: "ValidationReport") -> Tuple["TrainingTask", TransferEvent]:
    """
    Replaces the master with the slave when the slave validates strictly better.

    The slave's current momentum buffer travels with it. A rejected transfer
    leaves the master bitwise unchanged.

    Returns:
        Tuple[TrainingTask, TransferEvent]: The task and the recorded event.
    """
    if not task.slave_active or report.slave_val_loss is None:
        raise ConfigError(f"task {task.task_id} has no reallocated slave to judge")
    accepted = report.slave_val_loss < report.master_val_loss
    increment = relationship_increment(report.master_val_loss, report.slave_val_loss)
    if accepted:
        task.master_params = task.slave_params.copy()
    event = TransferEvent(
        checkpoint=report.checkpoint,
        receiver=task.task_id,
        source=task.slave_source,
        master_val_loss=report.master_val_loss,
        slave_val_loss=report.slave_val_loss,
        accepted=bool(accepted),
        rl_increment=increment,
    )
    logger.debug(f"Task {task.task_id} <- {task.slave_source}: master={report.master_val_loss:.6f} "
                 f"slave={report.slave_val_loss:.6f} accepted={accepted}")
    return task, event



########################################################
### Relationship Update
############################

def relationship_increment(master_val_loss: float, slave_val_loss: float) -> float:
    """
    tanh(master_val_loss - slave_val_loss), saturated at the largest double
    below 1 in magnitude (math.tanh rounds to exactly 1.0 past about 19.06).
    """
    if not (math.isfinite(master_val_loss) and math.isfinite(slave_val_loss)):
        raise NonFiniteError(f"non-finite validation losses ({master_val_loss}, {slave_val_loss})")
    increment = math.tanh(master_val_loss - slave_val_loss)
    return math.copysign(min(abs(increment), _BELOW_ONE), increment)


def update_relationship(rl: RelationshipList, source: int, master_val_loss: float,
                        slave_val_loss: float) -> RelationshipList:
    """
    r_j <- r_j + tanh(master_val_loss - slave_val_loss); only entry j changes.

    Raises:
        ConfigError: If j is the owner itself or out of range.
        NonFiniteError: If either loss is not finite.
    """
    if source == rl.owner or not 0 <= source < rl.task_count:
        raise ConfigError(f"invalid relationship source {source} for task {rl.owner}")
    rl.r[source] += relationship_increment(master_val_loss, slave_val_loss)
    return rl

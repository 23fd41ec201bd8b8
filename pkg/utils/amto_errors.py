from typing import Any, Optional



######### AMTO Error Objects

class AmtoError(Exception):
    """
    Base exception for every failure raised by the training framework.

    Attributes:
        class_name (str): The name of the concrete error class.
        message (str): Human readable description of the failure.
        error_code (int): Process exit code the CLI maps this error to.
        details (Any): Optional structured context (task id, row number, column name...).

    Example:
        raise DataError("label 5 out of range [0, 3)", details={"row": 4})
    """

    default_code = 1

    def __init__(self, message: str, code: Optional[int] = None, details: Any = None):
        super().__init__(message)
        self.class_name = self.__class__.__name__
        self.message = message
        self.error_code = self.default_code if code is None else code
        self.details = details

    def __str__(self):
        suffix = f" {self.details}" if self.details is not None else ""
        return '%s: %s - %s%s' % (self.class_name, self.error_code, self.message, suffix)


class ConfigError(AmtoError):
    """
    Raised for invalid experiment spec files, unknown keys and out-of-range settings.
    The CLI exits with code 2 for this error.
    """
    default_code = 2


class DataError(AmtoError):
    """
    Raised for dataset problems: CSV parse failures, labels out of range,
    splits that leave an empty side, unsupported generator combinations.
    """
    pass


class DimensionError(AmtoError):
    """Raised when an input matrix does not match the network input width."""
    pass


class NonFiniteError(AmtoError):
    """
    Raised when a loss, gradient or parameter update stops being finite.

    Attributes:
        task_id (Optional[int]): Task whose training produced the value, when known.
        iteration (Optional[int]): Global iteration at which it happened, when known.
    """

    def __init__(self, message: str, task_id: Optional[int] = None, iteration: Optional[int] = None):
        super().__init__(message, details={"task_id": task_id, "iteration": iteration})
        self.task_id = task_id
        self.iteration = iteration


class CompatibilityError(AmtoError):
    """Raised when two parameter vectors (or a checkpoint and a spec) do not share a layout."""
    pass


class WorkerError(AmtoError):
    """
    Raised by the orchestrator when a training closure fails inside the worker pool.

    Attributes:
        task_id (int): Task owning the failed computing unit.
        role (str): 'master' or 'slave'.
        cause (BaseException): The original exception raised by the worker.
    """

    def __init__(self, task_id: int, role: str, cause: BaseException):
        super().__init__(f"{role} unit of task {task_id} failed: {cause}",
                         details={"task_id": task_id, "role": role})
        self.task_id = task_id
        self.role = role
        self.cause = cause


class SchemaError(AmtoError):
    """Raised when a metrics CSV is empty or does not carry the expected columns."""
    pass

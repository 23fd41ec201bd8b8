import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from dotenv import load_dotenv

from controllers.amto_controller import EarlyStopPolicy, RunConfig, RunMode
from utils.amto_errors import AmtoError, ConfigError
from utils.data_utils import Dataset, SyntheticKind, derive_seed, load_csv, make_synthetic
from utils.nn_utils import Activation, InitScheme, NetworkSpec, OptimizerConfig


# ---------------------------
# Load Environment Variables
# ---------------------------
load_dotenv()

logger = logging.getLogger(__name__)


INIT_SALT = 0x1417



######### Value Parsers

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> Tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(part) for part in text.split(","))


def _parse_shape(text: str) -> Tuple[int, ...]:
    shape = tuple(int(part) for part in text.lower().split("x"))
    if len(shape) not in (2, 3) or any(s < 1 for s in shape):
        raise ValueError(f"expected HxW or HxWxC, got {text!r}")
    return shape


def _choice(*allowed: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {value!r}")
        return value
    return parse


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default); a default of None means "absent"
SPEC_KEYS: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    "dataset.kind": (_choice("blobs", "two_moons", "ring", "csv"), "blobs"),
    "dataset.path": (_str, None),
    "dataset.label_column": (int, -1),
    "dataset.has_header": (_parse_bool, False),
    "dataset.class_count": (int, 2),
    "dataset.samples": (int, 1000),
    "dataset.noise": (float, 0.5),
    "dataset.label_noise": (float, 0.0),
    "dataset.feature_dim": (int, 2),
    "dataset.seed": (int, None),
    "dataset.test_ratio": (float, 0.2),
    "dataset.hflip_shape": (_parse_shape, None),
    "model.hidden": (_parse_int_list, (32,)),
    "model.activation": (_choice("relu", "tanh"), "relu"),
    "model.init": (_choice("he_uniform", "xavier_uniform"), "he_uniform"),
    "model.shared_init": (_parse_bool, True),
    "optimizer.lr": (float, 1e-3),
    "optimizer.momentum": (float, 0.9),
    "optimizer.milestones": (_parse_int_list, (2000, 7000)),
    "optimizer.decay": (float, 0.1),
    "optimizer.batch_size": (int, 64),
    "amto.tasks": (int, 4),
    "amto.checkpoint_interval": (int, 100),
    "amto.patience": (int, 10),
    "amto.val_ratio": (float, 0.1),
    "amto.early_stop_policy": (_choice("all", "any"), "all"),
    "amto.keep_best": (_parse_bool, False),
    "run.seed": (int, 0),
    "run.max_iterations": (int, 10000),
    "run.mode": (_choice("sto_no_val", "sto_with_val", "amto"), "amto"),
    "run.output_dir": (_str, None),
    "run.repeats": (int, 5),
    "run.workers": (int, None),
    "run.sweep_counts": (_parse_int_list, (1, 2, 4, 6)),
}



######### Experiment Spec File

class ExperimentSpecFile:
    """
    Flat dotted-key experiment configuration.

    File format: one `key = value` per line; blank lines and lines starting
    with '#' are ignored. Every key must be one of SPEC_KEYS; unknown or
    repeated keys are a ConfigError naming the key.

    Environment:
        AMTO_WORKERS: default for run.workers (1 when unset).
        AMTO_OUTPUT_DIR: default for run.output_dir ('runs' when unset).
    """

    def __init__(self, values: Optional[Dict[str, Any]] = None, source: str = "<memory>") -> None:
        self.source = source
        self._values: Dict[str, Any] = {}
        for key, value in (values or {}).items():
            self._check_key(key)
            self._values[key] = value

    @staticmethod
    def _check_key(key: str) -> None:
        if key not in SPEC_KEYS:
            raise ConfigError(f"unknown config key '{key}'", details={"key": key})

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ExperimentSpecFile":
        values: Dict[str, Any] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{line_number}: expected 'key = value'", details={"line": line_number})
            key, _, text_value = line.partition("=")
            key = key.strip()
            cls._check_key(key)
            if key in values:
                raise ConfigError(f"{source}:{line_number}: duplicate key '{key}'", details={"key": key})
            parser, _ = SPEC_KEYS[key]
            try:
                values[key] = parser(text_value)
            except ValueError as e:
                raise ConfigError(f"{source}:{line_number}: invalid value for '{key}': {e}", details={"key": key})
        return cls(values, source)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentSpecFile":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"spec file not found: {path}")
        spec_file = cls.parse(path.read_text(encoding="utf-8"), str(path))
        logger.info(f"Loaded {len(spec_file._values)} keys from {path}")
        return spec_file

    def get(self, key: str) -> Any:
        self._check_key(key)
        if key in self._values:
            return self._values[key]
        if key == "run.workers":
            return int(os.getenv("AMTO_WORKERS", "1"))
        if key == "run.output_dir":
            return os.getenv("AMTO_OUTPUT_DIR", "runs")
        if key == "dataset.seed":
            return self.get("run.seed")
        return SPEC_KEYS[key][1]

    def with_overrides(self, **overrides: Any) -> "ExperimentSpecFile":
        """Copy with dotted keys replaced; pass keys with '__' for '.' (run__seed=3)."""
        values = dict(self._values)
        for name, value in overrides.items():
            if value is not None:
                values[name.replace("__", ".")] = value
        return ExperimentSpecFile(values, self.source)

    def as_dict(self) -> Dict[str, Any]:
        return {key: self.get(key) for key in SPEC_KEYS}



    ########################################################
    ### Builders
    ############################

    def build_dataset(self) -> Dataset:
        """Loads or generates the full annotated dataset (before the gross/test partition)."""
        kind = self.get("dataset.kind")
        if kind == "csv":
            path = self.get("dataset.path")
            if not path:
                raise ConfigError("dataset.kind = csv needs dataset.path")
            dataset = load_csv(path, self.get("dataset.label_column"), self.get("dataset.class_count"),
                               has_header=self.get("dataset.has_header"))
        else:
            dataset = make_synthetic(SyntheticKind(kind), self.get("dataset.samples"),
                                     self.get("dataset.class_count"), self.get("dataset.noise"),
                                     self.get("dataset.seed"), label_noise=self.get("dataset.label_noise"),
                                     feature_dim=self.get("dataset.feature_dim"))
        shape = self.get("dataset.hflip_shape")
        if shape is not None and math.prod(shape) != dataset.feature_dim:
            raise ConfigError(f"dataset.hflip_shape {shape} does not cover {dataset.feature_dim} features")
        return dataset

    def build_run_config(self, gross: Dataset, seed: Optional[int] = None, mode: Optional[str] = None,
                         task_count: Optional[int] = None, workers: Optional[int] = None) -> RunConfig:
        """
        Assembles the RunConfig for one run on `gross`.

        The shared initialization seed is derived from the run seed, so STO and
        AMTO runs with the same seed start from the same parameters.
        """
        seed = self.get("run.seed") if seed is None else seed
        mode = RunMode(mode or self.get("run.mode"))
        if task_count is None:
            task_count = self.get("amto.tasks") if mode is RunMode.AMTO else 1
        try:
            network = NetworkSpec(
                layer_sizes=(gross.feature_dim, *self.get("model.hidden"), gross.class_count),
                activation=Activation(self.get("model.activation")),
                init_scheme=InitScheme(self.get("model.init")),
                init_seed=derive_seed(seed, INIT_SALT),
            )
            optimizer = OptimizerConfig(
                initial_lr=self.get("optimizer.lr"),
                momentum=self.get("optimizer.momentum"),
                lr_milestones=self.get("optimizer.milestones"),
                lr_decay=self.get("optimizer.decay"),
                batch_size=self.get("optimizer.batch_size"),
            )
            return RunConfig(
                task_count=task_count,
                checkpoint_interval=self.get("amto.checkpoint_interval"),
                max_iterations=self.get("run.max_iterations"),
                patience=self.get("amto.patience"),
                val_ratio=self.get("amto.val_ratio"),
                master_seed=seed,
                network=network,
                optimizer=optimizer,
                mode=mode,
                early_stop_policy=EarlyStopPolicy(self.get("amto.early_stop_policy")),
                keep_best=self.get("amto.keep_best"),
                shared_init=self.get("model.shared_init"),
                workers=self.get("run.workers") if workers is None else workers,
                image_shape=self.get("dataset.hflip_shape"),
                dataset_name=gross.name,
            )
        except AmtoError as e:
            raise ConfigError(e.message, details=e.details)

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from controllers.amto_controller import METRICS_COLUMNS, AmtoController, RunMode, RunResult
from helpers.config import ExperimentSpecFile
from helpers.plot_helpers import SvgPlotHelper
from utils.amto_errors import ConfigError, SchemaError
from utils.data_utils import Dataset, partition_gross_test
from utils.nn_utils import NetworkSpec, loss_and_accuracy, save_params
from utils.transfer_utils import TransferEvent


METRICS_FILE = "metrics.csv"
EVENTS_FILE = "transfer_events.jsonl"
SUMMARY_FILE = "summary.json"
MODEL_FILE = "model.bin"



######### Artifact Writers

def write_metrics(rows: Sequence[Any], path: Union[str, Path]) -> Path:
    """Writes metrics rows (MetricsRow or dicts) with the fixed column order; empty cells for absent values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = [row if isinstance(row, dict) else row.to_dict() for row in rows]
    frame = pd.DataFrame.from_records(records, columns=METRICS_COLUMNS)
    frame["transfer_source"] = frame["transfer_source"].astype("Int64")
    frame["transfer_accepted"] = frame["transfer_accepted"].astype("boolean")
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    """
    Reads a metrics CSV back, checking its schema.

    Raises:
        SchemaError: Missing file, unexpected or missing column (named), or no data rows.
    """
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"metrics file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype={"run_id": str})
    except pd.errors.EmptyDataError:
        raise SchemaError(f"metrics file {path} is empty")
    for column in METRICS_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(f"missing column '{column}' in {path}", details={"column": column})
    for column in frame.columns:
        if column not in METRICS_COLUMNS:
            raise SchemaError(f"unexpected column '{column}' in {path}", details={"column": column})
    if frame.empty:
        raise SchemaError(f"metrics file {path} has a header but no rows")
    accepted = frame["transfer_accepted"].map({True: True, False: False, "True": True, "False": False})
    frame["transfer_accepted"] = accepted.astype("boolean")
    return frame[METRICS_COLUMNS]


def write_events(events: Sequence[TransferEvent], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for event in events:
            handle.write(json.dumps(event.to_dict()) + "\n")
    return path


def build_summary(result: RunResult, test_accuracy: Optional[float]) -> Dict[str, Any]:
    return {
        "run_id": result.run_id,
        "mode": result.mode.value,
        "seed": result.seed,
        "task_count": len(result.tasks),
        "winner": result.winner,
        "harmonic_accuracies": result.harmonic_accuracies,
        "accuracy_matrix": result.accuracy_matrix.tolist(),
        "stop_reason": result.stop_reason.value,
        "rounds": result.rounds,
        "iterations_per_task": result.tasks[result.winner].iteration,
        "best_val_losses": [t.best_val_loss if np.isfinite(t.best_val_loss) else None for t in result.tasks],
        "winner_val_loss": result.winner_val_loss,
        "test_accuracy": test_accuracy,
        "wall_time_seconds": round(result.wall_time_seconds, 3),
    }


@dataclass
class RunOutcome:
    result: RunResult
    test_accuracy: float
    output_dir: Path



######### Experiment Controller

class ExperimentController:
    """
    Executes the command-line experiments against one experiment spec file.

    The dataset is generated (or loaded) once and partitioned into a gross
    training set and a hidden test set (test_ratio, stratified); the
    orchestrator only ever receives the gross part.
    """

    def __init__(self, spec_file: ExperimentSpecFile, output_dir: Optional[Union[str, Path]] = None) -> None:
        self.logger = logging.getLogger(self.__class__.__name__)
        self.spec_file = spec_file
        self.output_dir = Path(output_dir or spec_file.get("run.output_dir"))
        self.plotter = SvgPlotHelper()
        self._partition: Optional[Tuple[Dataset, Dataset]] = None
        self.logger.info(f"ExperimentController initialized (spec={spec_file.source}, output={self.output_dir})")

    @property
    def partition(self) -> Tuple[Dataset, Dataset]:
        if self._partition is None:
            dataset = self.spec_file.build_dataset()
            self._partition = partition_gross_test(dataset, self.spec_file.get("dataset.test_ratio"),
                                                   self.spec_file.get("dataset.seed"))
        return self._partition



    ########################################################
    ### Single Run
    ############################

    def execute_run(self, output_dir: Path, seed: Optional[int] = None, mode: Optional[str] = None,
                    task_count: Optional[int] = None, workers: Optional[int] = None) -> RunOutcome:
        """Runs the orchestrator once and persists metrics, events, summary and the winning model."""
        gross, test = self.partition
        config = self.spec_file.build_run_config(gross, seed=seed, mode=mode, task_count=task_count,
                                                 workers=workers)
        result = AmtoController(config).run(gross)
        test_accuracy = self.test_accuracy(result.winner_params, config.network, test)

        write_metrics(result.metrics, output_dir / METRICS_FILE)
        write_events(result.events, output_dir / EVENTS_FILE)
        save_params(output_dir / MODEL_FILE, result.winner_params, config.network)
        summary = build_summary(result, test_accuracy)
        (output_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        self.logger.info(f"Run {config.run_id}: winner={result.winner} stop={result.stop_reason.value} "
                         f"test_accuracy={test_accuracy:.4f} -> {output_dir}")
        return RunOutcome(result, test_accuracy, output_dir)

    @staticmethod
    def test_accuracy(params, spec: NetworkSpec, test: Dataset) -> float:
        _, accuracy = loss_and_accuracy(params, spec, test.features, test.labels)
        return accuracy

    def cmd_run(self) -> RunOutcome:
        return self.execute_run(self.output_dir)



    ########################################################
    ### STO vs AMTO Comparison
    ############################

    def cmd_compare(self, repeats: Optional[int] = None) -> pd.DataFrame:
        """
        Paired STO (with validation) and AMTO runs over R seeds sharing each seed.

        Writes comparison.csv (one row per seed plus a 'mean' row, accuracies in
        percent, gap = AMTO - STO) and comparison.md in the same layout.
        """
        repeats = self.spec_file.get("run.repeats") if repeats is None else repeats
        if repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {repeats}")
        base_seed = self.spec_file.get("run.seed")
        task_count = self.spec_file.get("amto.tasks")

        rows = []
        for r in range(repeats):
            seed = base_seed + r
            sto = self.execute_run(self.output_dir / f"seed-{seed}" / "sto", seed=seed,
                                   mode=RunMode.STO_WITH_VAL.value)
            amto = self.execute_run(self.output_dir / f"seed-{seed}" / "amto", seed=seed,
                                    mode=RunMode.AMTO.value, task_count=task_count)
            rows.append({
                "seed": str(seed),
                "sto_accuracy": 100.0 * sto.test_accuracy,
                "amto_accuracy": 100.0 * amto.test_accuracy,
            })

        table = pd.DataFrame(rows, columns=["seed", "sto_accuracy", "amto_accuracy"])
        mean_row = {"seed": "mean", "sto_accuracy": table["sto_accuracy"].mean(),
                    "amto_accuracy": table["amto_accuracy"].mean()}
        table = pd.concat([table, pd.DataFrame([mean_row])], ignore_index=True)
        table["gap"] = table["amto_accuracy"] - table["sto_accuracy"]

        self.output_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(self.output_dir / "comparison.csv", index=False, lineterminator="\n")
        (self.output_dir / "comparison.md").write_text(self._comparison_markdown(table, task_count),
                                                       encoding="utf-8")
        self.logger.info(f"Comparison over {repeats} seeds: STO={mean_row['sto_accuracy']:.2f}% "
                         f"AMTO={mean_row['amto_accuracy']:.2f}%")
        return table

    def _comparison_markdown(self, table: pd.DataFrame, task_count: int) -> str:
        gross, _ = self.partition
        lines = [
            f"Mean top-1 test accuracy (%) on {gross.name}, STO vs AMTO (M={task_count})",
            "",
            "| seed | STO | AMTO | gap |",
            "|---|---|---|---|",
        ]
        for row in table.itertuples(index=False):
            lines.append(f"| {row.seed} | {row.sto_accuracy:.2f} | {row.amto_accuracy:.2f} | {row.gap:+.2f} |")
        return "\n".join(lines) + "\n"



    ########################################################
    ### Task-count Sweep
    ############################

    def cmd_sweep_tasks(self, task_counts: Optional[Sequence[int]] = None,
                        repeats: Optional[int] = None) -> pd.DataFrame:
        """
        Runs AMTO for every task count (M = 1 is plain STO with validation) over R seeds.

        Writes sweep.csv (task_count, mean_val_loss of the winner on its own
        validation set, mean_test_accuracy, runs) and the two-panel sweep.svg.
        """
        task_counts = list(self.spec_file.get("run.sweep_counts") if task_counts is None else task_counts)
        repeats = self.spec_file.get("run.repeats") if repeats is None else repeats
        if not task_counts or any(m < 1 for m in task_counts):
            raise ConfigError(f"task counts must all be >= 1, got {task_counts}")
        if repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {repeats}")
        base_seed = self.spec_file.get("run.seed")

        rows = []
        for task_count in task_counts:
            losses, accuracies = [], []
            for r in range(repeats):
                seed = base_seed + r
                mode = RunMode.AMTO.value if task_count > 1 else RunMode.STO_WITH_VAL.value
                outcome = self.execute_run(self.output_dir / f"m{task_count}" / f"seed-{seed}", seed=seed,
                                           mode=mode, task_count=task_count)
                losses.append(outcome.result.winner_val_loss)
                accuracies.append(outcome.test_accuracy)
            rows.append({
                "task_count": task_count,
                "mean_val_loss": float(np.mean(losses)),
                "mean_test_accuracy": float(np.mean(accuracies)),
                "runs": repeats,
            })
            self.logger.info(f"Sweep M={task_count}: val_loss={rows[-1]['mean_val_loss']:.4f} "
                             f"test_accuracy={rows[-1]['mean_test_accuracy']:.4f}")

        sweep = pd.DataFrame(rows, columns=["task_count", "mean_val_loss", "mean_test_accuracy", "runs"])
        self.output_dir.mkdir(parents=True, exist_ok=True)
        sweep.to_csv(self.output_dir / "sweep.csv", index=False, lineterminator="\n")
        self.plotter.render_sweep(sweep, self.output_dir / "sweep.svg")
        return sweep




######### Plot Command

def cmd_plot(metrics_csv: Union[str, Path], output_dir: Optional[Union[str, Path]] = None,
             plotter: Optional[SvgPlotHelper] = None) -> List[Path]:
    """
    One loss-curve SVG per run id found in a metrics CSV, written next to the
    CSV unless an output directory is given. Output bytes depend only on the CSV.

    Raises:
        SchemaError: Missing file, bad columns or no data rows.
    """
    metrics_csv = Path(metrics_csv)
    frame = read_metrics(metrics_csv)
    plotter = plotter or SvgPlotHelper()
    target = Path(output_dir) if output_dir is not None else metrics_csv.parent
    paths = []
    for run_id, rows in frame.groupby("run_id", sort=True):
        paths.append(plotter.render_loss_curves(rows, target / f"{metrics_csv.stem}-{run_id}.svg"))
    return paths

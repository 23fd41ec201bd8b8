import logging
from pathlib import Path
from typing import Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd


logger = logging.getLogger(__name__)


# fixed salt and text-as-text keep SVG bytes a pure function of the data
SVG_RC = {
    "svg.hashsalt": "amto-plots",
    "svg.fonttype": "none",
    "path.simplify": False,
}



class SvgPlotHelper():
    """
    Renders the static figures of a run or an experiment as SVG files.

    Every figure is a pure function of the frame it is given: no timestamps
    are embedded and element ids are derived from a fixed salt.
    """

    ###################################
    ### Class Initialization

    def __init__(self, width: float = 10.0, height: float = 4.0) -> None:
        self.figsize = (width, height)



    ########################################################
    ### Figures
    ############################

    def _save(self, fig, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        logger.info(f"Plot written to {path}")
        return path

    def render_loss_curves(self, metrics: pd.DataFrame, path: Union[str, Path]) -> Path:
        """
        Per-task master validation loss against the global iteration, with a
        marker wherever a transfer was accepted.

        Args:
            metrics (pd.DataFrame): Rows of a single run (metrics CSV schema).
            path (Union[str, Path]): Target SVG file.

        Returns:
            Path: The written file.
        """
        with plt.rc_context(SVG_RC):
            fig, ax = plt.subplots(figsize=self.figsize)
            for task_id, rows in metrics.groupby("task_id", sort=True):
                rows = rows.sort_values("checkpoint")
                loss_column = "master_val_loss" if rows["master_val_loss"].notna().any() else "train_loss"
                ax.plot(rows["global_iteration"], rows[loss_column], label=f"task {task_id}", linewidth=1.2)
                accepted = rows[rows["transfer_accepted"].fillna(False).astype(bool)]
                if not accepted.empty:
                    ax.scatter(accepted["global_iteration"], accepted["slave_val_loss"], marker="^", s=18)
            run_id = str(metrics["run_id"].iloc[0])
            ax.set_title(f"validation loss - {run_id}")
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.legend(loc="upper right", fontsize="small")
            return self._save(fig, path)

    def render_sweep(self, sweep: pd.DataFrame, path: Union[str, Path]) -> Path:
        """
        Two panels over the task count M: winner's mean validation loss, and mean test accuracy.

        Args:
            sweep (pd.DataFrame): Columns task_count, mean_val_loss, mean_test_accuracy.
            path (Union[str, Path]): Target SVG file.
        """
        with plt.rc_context(SVG_RC):
            fig, (loss_ax, accuracy_ax) = plt.subplots(1, 2, figsize=self.figsize)
            sweep = sweep.sort_values("task_count")
            loss_ax.plot(sweep["task_count"], sweep["mean_val_loss"], marker="o")
            loss_ax.set_xlabel("formulated tasks M")
            loss_ax.set_ylabel("mean validation loss")
            loss_ax.set_xticks(list(sweep["task_count"]))
            accuracy_ax.plot(sweep["task_count"], 100.0 * sweep["mean_test_accuracy"], marker="s")
            accuracy_ax.set_xlabel("formulated tasks M")
            accuracy_ax.set_ylabel("mean top-1 test accuracy (%)")
            accuracy_ax.set_xticks(list(sweep["task_count"]))
            fig.tight_layout()
            return self._save(fig, path)

import argparse
import logging
import os
import sys
from typing import List, Optional

from colorama import Fore, Style, init as colorama_init
from dotenv import load_dotenv

from controllers.experiment_controller import ExperimentController, cmd_plot
from helpers.config import ExperimentSpecFile
from utils.amto_errors import AmtoError, ConfigError


# ---------------------------
# Load Environment Variables
# ---------------------------
load_dotenv()  # Load .env file

LOG_FILE = os.getenv("AMTO_LOG_FILE", "amto.log")
LOG_LEVEL = os.getenv("AMTO_LOG_LEVEL", "INFO").upper()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


logger = logging.getLogger("amto")



# ---------------------------
# Setup Logging (File + Stdout)
# ---------------------------
def setup_logging(log_file: str = LOG_FILE, level: str = LOG_LEVEL) -> None:
    root = logging.getLogger()
    root.setLevel(getattr(logging, level, logging.INFO))
    if getattr(root, "_amto_configured", False):
        return

    # Formatter
    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(name)s - %(message)s")

    # File Handler
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    # Stdout Handler
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    root.addHandler(stream_handler)
    root._amto_configured = True



# ---------------------------
# Argument Parsing
# ---------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override run.seed")
    common.add_argument("--output-dir", default=None, help="override run.output_dir")
    common.add_argument("--workers", type=int, default=None, help="override run.workers")

    parser = argparse.ArgumentParser(prog="amto", description="Adaptive multi-task DNN training experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", parents=[common], help="single training run")
    run_parser.add_argument("spec", help="experiment spec file")

    compare_parser = commands.add_parser("compare", parents=[common], help="paired STO vs AMTO runs")
    compare_parser.add_argument("spec", help="experiment spec file")
    compare_parser.add_argument("--repeats", type=int, default=None, help="number of paired seeds")

    sweep_parser = commands.add_parser("sweep-tasks", parents=[common], help="AMTO over several task counts")
    sweep_parser.add_argument("spec", help="experiment spec file")
    sweep_parser.add_argument("--counts", default=None, help="comma separated task counts, e.g. 1,2,4,6")
    sweep_parser.add_argument("--repeats", type=int, default=None, help="seeds per task count")

    plot_parser = commands.add_parser("plot", parents=[common], help="loss curves from a metrics CSV")
    plot_parser.add_argument("csv", help="metrics CSV written by a run")
    return parser


def _parse_counts(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"--counts must be a comma separated list of integers, got {text!r}")


def _load_controller(args: argparse.Namespace) -> ExperimentController:
    spec_file = ExperimentSpecFile.load(args.spec).with_overrides(
        run__seed=args.seed, run__output_dir=args.output_dir, run__workers=args.workers)
    return ExperimentController(spec_file)



# ---------------------------
# Commands
# ---------------------------
def dispatch(args: argparse.Namespace) -> None:
    if args.command == "run":
        outcome = _load_controller(args).cmd_run()
        result = outcome.result
        print(Fore.GREEN + f"winner=task {result.winner} stop_reason={result.stop_reason.value} "
              f"test_accuracy={100.0 * outcome.test_accuracy:.2f}% -> {outcome.output_dir}" + Style.RESET_ALL)
    elif args.command == "compare":
        table = _load_controller(args).cmd_compare(args.repeats)
        print(Fore.GREEN + table.to_string(index=False, float_format=lambda v: f"{v:.2f}") + Style.RESET_ALL)
    elif args.command == "sweep-tasks":
        sweep = _load_controller(args).cmd_sweep_tasks(_parse_counts(args.counts), args.repeats)
        print(Fore.GREEN + sweep.to_string(index=False) + Style.RESET_ALL)
    elif args.command == "plot":
        for path in cmd_plot(args.csv, output_dir=args.output_dir):
            print(Fore.GREEN + str(path) + Style.RESET_ALL)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parses the command line, runs the command and maps failures to exit codes:
    0 success, 1 runtime abort, 2 configuration error.
    """
    colorama_init()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigError as e:
        logger.error(str(e))
        print(Fore.YELLOW + f"config error: {e.message}" + Style.RESET_ALL, file=sys.stderr)
        return EXIT_CONFIG
    except AmtoError as e:
        logger.error(str(e))
        print(Fore.RED + f"aborted: {e.message}" + Style.RESET_ALL, file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("Unexpected failure")
        print(Fore.RED + f"aborted: {e}" + Style.RESET_ALL, file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK



# ---------------------------
# Main App
# ---------------------------
if __name__ == '__main__':
    sys.exit(main())

import json
import xml.etree.ElementTree as ElementTree

import pandas as pd
import pytest

import main
from controllers.amto_controller import METRICS_COLUMNS
from controllers.experiment_controller import (EVENTS_FILE, METRICS_FILE, MODEL_FILE, SUMMARY_FILE,
                                               ExperimentController, cmd_plot, read_metrics, write_metrics)
from helpers.config import ExperimentSpecFile
from utils.amto_errors import SchemaError
from utils.nn_utils import load_params


BASE_SPEC = """
dataset.kind = blobs
dataset.samples = 300
dataset.class_count = 3
dataset.noise = 0.6
model.hidden = 8
optimizer.lr = 0.05
optimizer.batch_size = 32
amto.checkpoint_interval = 20
amto.patience = 3
run.max_iterations = 200
run.seed = 5
"""

GOLDEN_HEADER = ("run_id,seed,task_id,checkpoint,global_iteration,train_loss,master_val_loss,slave_val_loss,"
                 "val_accuracy,lr,transfer_source,transfer_accepted")


@pytest.fixture
def write_spec(tmp_path):
    def write(extra="", name="experiment.spec"):
        path = tmp_path / name
        path.write_text(BASE_SPEC + extra, encoding="utf-8")
        return str(path)
    return write


def _run(spec, output_dir, *extra):
    return main.main(["run", spec, "--output-dir", str(output_dir), *extra])



######### run

def test_run_writes_all_artifacts(write_spec, tmp_path):
    assert _run(write_spec("amto.tasks = 3\n"), tmp_path / "out") == main.EXIT_OK
    out = tmp_path / "out"
    for name in (METRICS_FILE, EVENTS_FILE, SUMMARY_FILE, MODEL_FILE):
        assert (out / name).is_file()

    summary = json.loads((out / SUMMARY_FILE).read_text())
    assert summary["task_count"] == 3
    assert summary["stop_reason"] in ("max_iter", "early_stop")
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    assert len(summary["accuracy_matrix"]) == 3
    assert summary["winner"] == max(range(3), key=lambda m: (summary["harmonic_accuracies"][m], -m))

    events = [json.loads(line) for line in (out / EVENTS_FILE).read_text().splitlines()]
    assert len(events) == 3 * summary["rounds"]
    assert set(events[0]) == {"checkpoint", "receiver", "source", "master_val_loss", "slave_val_loss",
                              "accepted", "rl_increment"}


def test_metrics_header_is_stable(write_spec, tmp_path):
    _run(write_spec(), tmp_path / "out")
    first_line = (tmp_path / "out" / METRICS_FILE).read_text().splitlines()[0]
    assert first_line == GOLDEN_HEADER


def test_repeated_runs_are_byte_identical(write_spec, tmp_path):
    spec = write_spec("amto.tasks = 3\n")
    _run(spec, tmp_path / "a")
    _run(spec, tmp_path / "b")
    for name in (METRICS_FILE, EVENTS_FILE, MODEL_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_worker_count_does_not_change_outputs(write_spec, tmp_path):
    spec = write_spec("amto.tasks = 4\n")
    for workers in (1, 4, 8):
        assert _run(spec, tmp_path / f"w{workers}", "--workers", str(workers)) == main.EXIT_OK
    reference = (tmp_path / "w1" / METRICS_FILE).read_bytes()
    assert (tmp_path / "w4" / METRICS_FILE).read_bytes() == reference
    assert (tmp_path / "w8" / METRICS_FILE).read_bytes() == reference


def test_single_task_amto_matches_sto_files(write_spec, tmp_path):
    amto = write_spec("run.mode = amto\namto.tasks = 1\n", name="amto.spec")
    sto = write_spec("run.mode = sto_with_val\n", name="sto.spec")
    _run(amto, tmp_path / "amto")
    _run(sto, tmp_path / "sto")
    for name in (METRICS_FILE, MODEL_FILE):
        assert (tmp_path / "amto" / name).read_bytes() == (tmp_path / "sto" / name).read_bytes()


def test_saved_model_loads_back(write_spec, tmp_path):
    spec = write_spec("amto.tasks = 2\n")
    _run(spec, tmp_path / "out")
    spec_file = ExperimentSpecFile.load(spec)
    controller = ExperimentController(spec_file, tmp_path / "unused")
    gross, test = controller.partition
    config = spec_file.build_run_config(gross)
    params = load_params(tmp_path / "out" / MODEL_FILE, config.network)
    summary = json.loads((tmp_path / "out" / SUMMARY_FILE).read_text())
    assert ExperimentController.test_accuracy(params, config.network, test) == summary["test_accuracy"]


def test_test_partition_is_hidden(write_spec):
    controller = ExperimentController(ExperimentSpecFile.load(write_spec()))
    gross, test = controller.partition
    assert gross.size == 240
    assert test.size == 60
    gross_rows = {tuple(row) for row in gross.features}
    assert not any(tuple(row) in gross_rows for row in test.features)


def test_unknown_key_exits_with_config_code(tmp_path, capsys):
    path = tmp_path / "typo.spec"
    path.write_text(BASE_SPEC + "amto.taks = 4\n", encoding="utf-8")
    assert _run(str(path), tmp_path / "out") == main.EXIT_CONFIG
    assert "amto.taks" in capsys.readouterr().err


def test_runtime_failure_exits_with_one(tmp_path):
    path = tmp_path / "moons.spec"
    path.write_text("dataset.kind = two_moons\ndataset.class_count = 3\n", encoding="utf-8")
    assert _run(str(path), tmp_path / "out") == main.EXIT_RUNTIME



######### compare / sweep-tasks

def test_compare_table(write_spec, tmp_path):
    spec = write_spec("amto.tasks = 3\n")
    assert main.main(["compare", spec, "--repeats", "2", "--output-dir", str(tmp_path / "cmp")]) == main.EXIT_OK
    table = pd.read_csv(tmp_path / "cmp" / "comparison.csv", dtype={"seed": str})
    assert list(table["seed"]) == ["5", "6", "mean"]
    assert table.loc[2, "sto_accuracy"] == pytest.approx(table.loc[:1, "sto_accuracy"].mean())
    assert table.loc[2, "amto_accuracy"] == pytest.approx(table.loc[:1, "amto_accuracy"].mean())
    assert (table["gap"] == table["amto_accuracy"] - table["sto_accuracy"]).all()
    assert (tmp_path / "cmp" / "comparison.md").read_text().count("\n| ") == 4


def test_compare_with_one_task_has_no_gap(write_spec, tmp_path):
    spec_file = ExperimentSpecFile.load(write_spec("amto.tasks = 1\n"))
    table = ExperimentController(spec_file, tmp_path / "cmp").cmd_compare(repeats=2)
    assert (table["sto_accuracy"] == table["amto_accuracy"]).all()


def test_sweep_tasks(write_spec, tmp_path):
    spec = write_spec()
    code = main.main(["sweep-tasks", spec, "--counts", "1,2,3,4", "--repeats", "1",
                      "--output-dir", str(tmp_path / "sweep")])
    assert code == main.EXIT_OK
    sweep = pd.read_csv(tmp_path / "sweep" / "sweep.csv")
    assert list(sweep["task_count"]) == [1, 2, 3, 4]
    assert (sweep["runs"] == 1).all()
    assert sweep["mean_test_accuracy"].between(0.0, 1.0).all()

    root = ElementTree.parse(tmp_path / "sweep" / "sweep.svg").getroot()
    group_ids = {element.get("id") for element in root.iter() if element.get("id")}
    assert {"axes_1", "axes_2"} <= group_ids


def test_sweep_single_task_row_matches_sto(write_spec, tmp_path):
    spec_file = ExperimentSpecFile.load(write_spec())
    sweep = ExperimentController(spec_file, tmp_path / "sweep").cmd_sweep_tasks([1], repeats=1)
    table = ExperimentController(spec_file, tmp_path / "cmp").cmd_compare(repeats=1)
    assert 100.0 * sweep.loc[0, "mean_test_accuracy"] == pytest.approx(table.loc[0, "sto_accuracy"])


def test_sweep_rejects_bad_counts(write_spec, tmp_path):
    assert main.main(["sweep-tasks", write_spec(), "--counts", "0,2", "--output-dir", str(tmp_path)]) \
        == main.EXIT_CONFIG
    assert main.main(["sweep-tasks", write_spec(), "--counts", "a,b", "--output-dir", str(tmp_path)]) \
        == main.EXIT_CONFIG



######### plot

def test_plot_writes_one_svg_per_run(write_spec, tmp_path):
    _run(write_spec("amto.tasks = 3\n"), tmp_path / "out")
    csv = tmp_path / "out" / METRICS_FILE
    assert main.main(["plot", str(csv)]) == main.EXIT_OK
    svg = tmp_path / "out" / "metrics-m3-s5.svg"
    assert svg.is_file()
    ElementTree.parse(svg)


def test_plot_depends_only_on_the_csv(write_spec, tmp_path):
    _run(write_spec("amto.tasks = 2\n"), tmp_path / "out")
    csv = tmp_path / "out" / METRICS_FILE
    first = cmd_plot(csv, output_dir=tmp_path / "p1")
    second = cmd_plot(csv, output_dir=tmp_path / "p2")
    assert [p.name for p in first] == [p.name for p in second]
    assert first[0].read_bytes() == second[0].read_bytes()


def test_plot_handles_multiple_runs(write_spec, tmp_path):
    _run(write_spec("amto.tasks = 2\n"), tmp_path / "a")
    _run(write_spec("amto.tasks = 3\n", name="other.spec"), tmp_path / "b")
    combined = pd.concat([read_metrics(tmp_path / "a" / METRICS_FILE), read_metrics(tmp_path / "b" / METRICS_FILE)])
    csv = write_metrics(combined.to_dict("records"), tmp_path / "combined.csv")
    paths = cmd_plot(csv)
    assert sorted(p.name for p in paths) == ["combined-m2-s5.svg", "combined-m3-s5.svg"]


def test_plot_rejects_header_only_csv(tmp_path):
    csv = tmp_path / "empty.csv"
    csv.write_text(GOLDEN_HEADER + "\n")
    with pytest.raises(SchemaError):
        cmd_plot(csv)
    assert main.main(["plot", str(csv)]) == main.EXIT_RUNTIME


def test_plot_rejects_empty_file(tmp_path):
    csv = tmp_path / "blank.csv"
    csv.write_text("")
    with pytest.raises(SchemaError):
        cmd_plot(csv)


def test_plot_names_the_missing_column(tmp_path):
    csv = tmp_path / "partial.csv"
    columns = [c for c in METRICS_COLUMNS if c != "lr"]
    csv.write_text(",".join(columns) + "\n" + ",".join("1" for _ in columns) + "\n")
    with pytest.raises(SchemaError) as e:
        cmd_plot(csv)
    assert "lr" in e.value.message
    assert e.value.details == {"column": "lr"}


def test_plot_missing_file(tmp_path):
    with pytest.raises(SchemaError):
        cmd_plot(tmp_path / "nope.csv")

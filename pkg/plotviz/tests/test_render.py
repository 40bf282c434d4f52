import csv
import json
from pathlib import Path

import pytest

from plotviz import FigureKind, FigureSpec, RenderError, render
from plotviz.cli import main as cli_main

RESULT_COLUMNS = ["run_id", "experiment", "dataset", "architecture", "optimizer",
                  "regularizer", "seed", "task_id", "config_hash", "final_train_loss",
                  "metric_kind", "metric_convergence", "metric_completion", "param_norm",
                  "convergence_step", "diverged", "confusion_convergence",
                  "confusion_completion", "wall_clock_s"]
PROBE_COLUMNS = (["run_id", "stage", "probe_kind", "radius", "base"]
                 + [f"step_{i}" for i in range(1, 11)] + ["final", "gap", "flagged"])


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def result_row(run_id, dataset="blobs", arch="mlp_sigmoid", optimizer="lo",
               regularizer="none", task_id=0, norm=3.5, metric=0.9):
    return [run_id, "classification_matrix", dataset, arch, optimizer, regularizer,
            "7", str(task_id), "hash", "0.1", "accuracy", repr(metric), repr(metric),
            repr(norm), "10", "0", "", "", "1.0"]


def probe_row(run_id, stage, kind="max_loss", radius=0.01, gap=0.002):
    steps = [repr(0.1 + 0.01 * i) for i in range(10)]
    return [run_id, stage, kind, repr(radius), repr(0.1), *steps, steps[-1], repr(gap), "0"]


@pytest.fixture
def matrix_csvs(tmp_path):
    results = write_csv(tmp_path / "results.csv", RESULT_COLUMNS, [
        result_row("mx-a-none", regularizer="none"),
        result_row("mx-a-sam", regularizer="sam"),
    ])
    probes = write_csv(tmp_path / "probes.csv", PROBE_COLUMNS, [
        probe_row("mx-a-none", "at_convergence", gap=0.004),
        probe_row("mx-a-none", "at_completion", gap=0.003),
        probe_row("mx-a-sam", "at_convergence", gap=0.002),
        probe_row("mx-a-sam", "at_completion", gap=0.001),
        probe_row("mx-a-sam", "at_completion", kind="grad_norm", gap=0.009),
    ])
    return results, probes


def test_probe_bars_cardinality(matrix_csvs, tmp_path):
    results, probes = matrix_csvs
    spec = FigureSpec(FigureKind.PROBE_BARS, radius_filter=(0.01,))
    report = render(spec, results, tmp_path / "figs", probes_csv=probes)
    assert len(report.figures) == 1
    fig = report.figures[0]
    # 2 regularizers x 2 stages x 1 radius of the max_loss metric
    assert fig.bars == 4
    assert [p.bars for p in fig.panels] == [2, 2]
    assert fig.path.exists() and fig.path.suffix == ".svg"


def test_probe_bars_annotations_equal_csv_cells(matrix_csvs, tmp_path):
    results, probes = matrix_csvs
    report = render(FigureSpec(FigureKind.PROBE_BARS), results, tmp_path / "f", probes_csv=probes)
    texts = [t for p in report.figures[0].panels for t in p.annotations]
    with open(probes) as f:
        gaps = [row["gap"] for row in csv.DictReader(f) if row["probe_kind"] == "max_loss"]
    assert sorted(texts) == sorted(gaps)
    svg = report.figures[0].path.read_text()
    assert all(t in svg for t in texts)  # the exact cell text is drawn


def test_one_image_per_group(tmp_path):
    results = write_csv(tmp_path / "results.csv", RESULT_COLUMNS, [
        result_row("r1", dataset="blobs"),
        result_row("r2", dataset="mnist"),
    ])
    probes = write_csv(tmp_path / "probes.csv", PROBE_COLUMNS, [
        probe_row("r1", "at_completion"),
        probe_row("r2", "at_completion"),
    ])
    report = render(FigureSpec(FigureKind.PROBE_BARS), results, tmp_path / "f", probes_csv=probes)
    assert len(report.figures) == 2
    assert sorted(f.group for f in report.figures) == [("blobs", "mlp_sigmoid"),
                                                       ("mnist", "mlp_sigmoid")]


def test_empty_csv_warns_and_renders_nothing(tmp_path, capsys):
    results = write_csv(tmp_path / "results.csv", RESULT_COLUMNS, [])
    probes = write_csv(tmp_path / "probes.csv", PROBE_COLUMNS, [])
    report = render(FigureSpec(FigureKind.PROBE_BARS), results, tmp_path / "f", probes_csv=probes)
    assert report.figures == [] and len(report.warnings) >= 1
    # CLI exits 0 on the same inputs
    code = cli_main(["--results", str(results), "--probes", str(probes),
                     "--kind", "probe_bars", "--out", str(tmp_path / "figs")])
    assert code == 0
    assert "warning" in capsys.readouterr().err


def test_missing_columns_is_an_error(tmp_path):
    bad = write_csv(tmp_path / "results.csv", ["run_id", "dataset"], [["r1", "blobs"]])
    probes = write_csv(tmp_path / "probes.csv", PROBE_COLUMNS, [probe_row("r1", "at_completion")])
    with pytest.raises(RenderError, match="missing columns"):
        render(FigureSpec(FigureKind.PROBE_BARS), bad, tmp_path / "f", probes_csv=probes)
    code = cli_main(["--results", str(bad), "--probes", str(probes),
                     "--kind", "probe_bars", "--out", str(tmp_path / "figs")])
    assert code == 1


def test_radius_filter_must_be_probed(matrix_csvs, tmp_path):
    results, probes = matrix_csvs
    with pytest.raises(RenderError, match="radius filter"):
        render(FigureSpec(FigureKind.PROBE_BARS, radius_filter=(0.07,)),
               results, tmp_path / "f", probes_csv=probes)


def test_rendering_is_deterministic(matrix_csvs, tmp_path):
    results, probes = matrix_csvs
    spec = FigureSpec(FigureKind.PROBE_BARS)
    a = render(spec, results, tmp_path / "a", probes_csv=probes).figures[0].path.read_bytes()
    b = render(spec, results, tmp_path / "b", probes_csv=probes).figures[0].path.read_bytes()
    assert a == b


def test_png_opt_in(matrix_csvs, tmp_path):
    results, probes = matrix_csvs
    spec = FigureSpec(FigureKind.PROBE_BARS, image_format="png")
    report = render(spec, results, tmp_path / "f", probes_csv=probes)
    assert report.figures[0].path.suffix == ".png"
    assert report.figures[0].path.stat().st_size > 0


@pytest.fixture
def ee_csv(tmp_path):
    rows = []
    for task in range(3):
        for opt in ("sgd", "lo"):
            rows.append(result_row(f"ee-{opt}-none-t{task}", dataset="cubic",
                                   arch="poly_regression", optimizer=opt,
                                   regularizer="none", task_id=task, norm=6.0, metric=0.95))
            rows.append(result_row(f"ee-{opt}-l2-t{task}", dataset="cubic",
                                   arch="poly_regression", optimizer=opt,
                                   regularizer="l2", task_id=task, norm=3.0, metric=0.9))
    return write_csv(tmp_path / "results.csv", RESULT_COLUMNS, rows)


def test_early_evidence_panels(ee_csv, tmp_path):
    report = render(FigureSpec(FigureKind.EARLY_EVIDENCE), ee_csv, tmp_path / "f")
    assert len(report.figures) == 1
    fig = report.figures[0]
    assert [p.label for p in fig.panels] == ["param_norm", "r2"]
    assert all(p.bars == 12 for p in fig.panels)  # one bar per CSV row in each panel
    svg = fig.path.read_text()
    assert "-50%" in svg  # 6.0 -> 3.0 decrease annotated on the regularized bars


def test_early_evidence_annotations_match_csv(ee_csv, tmp_path):
    report = render(FigureSpec(FigureKind.EARLY_EVIDENCE), ee_csv, tmp_path / "f")
    with open(ee_csv) as f:
        rows = list(csv.DictReader(f))
    norms = sorted(r["param_norm"] for r in rows)
    panel = report.figures[0].panels[0]
    assert sorted(panel.annotations) == norms


def test_spec_file_via_cli(matrix_csvs, tmp_path, capsys):
    results, probes = matrix_csvs
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "figure_kind": "probe_bars", "radius_filter": [0.01],
        "stage_filter": ["at_completion"],
    }))
    code = cli_main(["--results", str(results), "--probes", str(probes),
                     "--spec", str(spec_path), "--out", str(tmp_path / "figs")])
    assert code == 0
    out = capsys.readouterr().out
    assert "2 bars" in out and "1 figure(s)" in out

"""Acceptance criterion A9: render the early-evidence and sharpness-transfer
experiment outputs with one bar per CSV row and byte-stable SVGs.

Prefers live outputs under the repository's acceptance_out/ (written by the
primary acceptance suite); falls back to committed copies of those same
files so this suite runs standalone.
"""

import csv
import time
from pathlib import Path

from plotviz import FigureKind, FigureSpec, render

HERE = Path(__file__).parent
LIVE = HERE.parent.parent / "acceptance_out"
DATA = HERE / "data"


def _source(sub: str, name: str) -> Path:
    live = LIVE / sub / name
    return live if live.exists() else DATA / sub / name


def _rows(path: Path, predicate=lambda r: True) -> list[dict]:
    with open(path) as f:
        return [r for r in csv.DictReader(f) if predicate(r)]


def test_a9_plot_fidelity(tmp_path):
    t0 = time.time()
    # --- probe bars from the sharpness-transfer outputs -----------------
    a6_results = _source("a6", "results.csv")
    a6_probes = _source("a6", "probes.csv")
    spec = FigureSpec(FigureKind.PROBE_BARS, radius_filter=(0.01,))
    report = render(spec, a6_results, tmp_path / "p1", probes_csv=a6_probes)
    assert len(report.figures) == 1
    expected = _rows(a6_probes, lambda r: r["probe_kind"] == "max_loss"
                     and float(r["radius"]) == 0.01)
    assert report.figures[0].bars == len(expected)
    gap_cells = sorted(r["gap"] for r in expected)
    drawn = sorted(t for p in report.figures[0].panels for t in p.annotations)
    assert drawn == gap_cells

    again = render(spec, a6_results, tmp_path / "p2", probes_csv=a6_probes)
    assert (report.figures[0].path.read_bytes() == again.figures[0].path.read_bytes())

    # --- early-evidence panels ------------------------------------------
    a5_results = _source("a5", "results.csv")
    spec_ee = FigureSpec(FigureKind.EARLY_EVIDENCE)
    ee = render(spec_ee, a5_results, tmp_path / "e1")
    assert len(ee.figures) == 1
    n_rows = len(_rows(a5_results))
    assert all(p.bars == n_rows for p in ee.figures[0].panels)

    ee2 = render(spec_ee, a5_results, tmp_path / "e2")
    assert ee.figures[0].path.read_bytes() == ee2.figures[0].path.read_bytes()

    print(f"\nA9 PASS ({time.time() - t0:.1f}s) — probe bars {report.figures[0].bars} "
          f"bars == {len(expected)} rows; early-evidence panels {n_rows} bars/panel; "
          "SVG bytes identical across reruns")

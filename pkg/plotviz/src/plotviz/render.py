"""Turn harness CSVs into figures.

Two figure kinds:

  * probe bars — per (dataset, architecture) group, the sharpness-probe gap
    of every matching probes.csv row, one bar per row, one subplot column
    per training stage, color/hatch keyed by regularizer;
  * early-evidence panels — per group, a parameter-norm panel (log scale,
    with the percentage norm decrease annotated over each regularized bar)
    and an R² panel, again one bar per matching results.csv row.

Every bar is annotated with the exact CSV cell text it was built from, and
rendering is deterministic: identical inputs produce byte-identical SVGs
(fixed hash salt, no embedded dates).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "plotviz",
    "figure.dpi": 110,
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",  # text stays text: annotations are greppable
}

REGULARIZER_COLORS = {
    "none": "#8c8c8c",
    "sam": "#1f77b4",
    "gsam": "#ff7f0e",
    "gam": "#2ca02c",
    "l2": "#9467bd",
}
FALLBACK_COLOR = "#555555"
STAGE_ORDER = ["at_convergence", "at_completion"]


class RenderError(ValueError):
    pass


class FigureKind(str, Enum):
    PROBE_BARS = "probe_bars"
    EARLY_EVIDENCE = "early_evidence"


@dataclass(frozen=True)
class FigureSpec:
    figure_kind: FigureKind
    group_by: tuple = ("dataset", "architecture")
    radius_filter: tuple | None = None
    stage_filter: tuple | None = None
    regularizer_filter: tuple | None = None
    probe_metric: str = "max_loss"
    image_format: str = "svg"

    def __post_init__(self):
        if self.image_format not in ("svg", "png"):
            raise RenderError(f"unsupported image format '{self.image_format}'")


@dataclass
class PanelReport:
    label: str
    bars: int
    annotations: list[str] = field(default_factory=list)


@dataclass
class FigureReport:
    path: Path
    group: tuple
    panels: list[PanelReport]

    @property
    def bars(self) -> int:
        return sum(p.bars for p in self.panels)


@dataclass
class RenderReport:
    figures: list[FigureReport] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise RenderError(f"{path}: no header row")
        return list(reader)


def _require_columns(rows_name: str, rows: list[dict], needed: set, fieldnames):
    missing = needed - set(fieldnames or ())
    if missing:
        raise RenderError(f"{rows_name} is missing columns: {sorted(missing)}")


def _fieldnames(path) -> list[str]:
    with open(path, newline="") as f:
        return csv.DictReader(f).fieldnames or []


def render(spec: FigureSpec, results_csv, out_dir, probes_csv=None) -> RenderReport:
    """Render one image per group; returns what was drawn plus warnings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.figure_kind == FigureKind.PROBE_BARS:
        if probes_csv is None:
            raise RenderError("probe_bars needs a probes.csv")
        return _render_probe_bars(spec, results_csv, probes_csv, out)
    return _render_early_evidence(spec, results_csv, out)


def _group_key(row: dict, keys: tuple) -> tuple:
    return tuple(row.get(k, "") for k in keys)


def _save(fig, path: Path, fmt: str):
    if fmt == "svg":
        fig.savefig(path, format="svg", metadata={"Date": None})
    else:
        fig.savefig(path, format="png", metadata={"Software": "plotviz"})
    plt.close(fig)


def _bar_style(reg: str) -> dict:
    return {
        "color": REGULARIZER_COLORS.get(reg, FALLBACK_COLOR),
        "hatch": "" if reg == "none" else "//",
        "edgecolor": "white",
        "linewidth": 0.4,
    }


def _annotate_bars(ax, positions, values, texts):
    for x, v, t in zip(positions, values, texts):
        ax.annotate(t, (x, v), rotation=90, fontsize=4,
                    ha="center", va="bottom" if v >= 0 else "top")


def _render_probe_bars(spec: FigureSpec, results_csv, probes_csv, out: Path) -> RenderReport:
    results = read_csv(results_csv)
    probes = read_csv(probes_csv)
    _require_columns("results.csv", results, {"run_id", *spec.group_by, "regularizer"},
                     _fieldnames(results_csv))
    _require_columns("probes.csv", probes, {"run_id", "stage", "probe_kind", "radius", "gap"},
                     _fieldnames(probes_csv))
    report = RenderReport()

    run_info = {r["run_id"]: r for r in results}
    probed_radii = {float(p["radius"]) for p in probes}
    if spec.radius_filter is not None:
        extra = set(float(r) for r in spec.radius_filter) - probed_radii
        if extra:
            raise RenderError(f"radius filter {sorted(extra)} not among probed radii "
                              f"{sorted(probed_radii)}")

    rows = []
    for p in probes:
        info = run_info.get(p["run_id"])
        if info is None:
            report.warnings.append(f"probe row for unknown run_id {p['run_id']!r} skipped")
            continue
        if p["probe_kind"] != spec.probe_metric:
            continue
        if spec.radius_filter is not None and float(p["radius"]) not in set(map(float, spec.radius_filter)):
            continue
        if spec.stage_filter is not None and p["stage"] not in spec.stage_filter:
            continue
        reg = info["regularizer"]
        if spec.regularizer_filter is not None and reg not in spec.regularizer_filter:
            continue
        rows.append((_group_key(info, spec.group_by), p, reg))

    if not rows:
        report.warnings.append("no probe rows left after filtering; nothing to draw")
        return report

    groups = sorted({g for g, _, _ in rows})
    for group in groups:
        grp_rows = [(p, reg) for g, p, reg in rows if g == group]
        stages = [s for s in STAGE_ORDER if any(p["stage"] == s for p, _ in grp_rows)]
        stages += sorted({p["stage"] for p, _ in grp_rows} - set(STAGE_ORDER))
        with plt.rc_context(STYLE):
            fig, axes = plt.subplots(1, len(stages), figsize=(3.2 * len(stages), 2.6),
                                     squeeze=False)
            panels = []
            for ax, stage in zip(axes[0], stages):
                stage_rows = sorted(
                    ((p, reg) for p, reg in grp_rows if p["stage"] == stage),
                    key=lambda pr: (pr[1], pr[0]["run_id"], float(pr[0]["radius"])))
                values = [float(p["gap"]) for p, _ in stage_rows]
                texts = [p["gap"] for p, _ in stage_rows]
                xs = range(len(stage_rows))
                for x, v, (p, reg) in zip(xs, values, stage_rows):
                    ax.bar([x], [v], **_bar_style(reg))
                _annotate_bars(ax, xs, values, texts)
                ax.set_title(stage.replace("_", " "))
                ax.set_ylabel(f"{spec.probe_metric} gap")
                ax.set_xticks(list(xs))
                ax.set_xticklabels([reg for _, reg in stage_rows], rotation=90, fontsize=5)
                panels.append(PanelReport(stage, len(stage_rows), texts))
            fig.suptitle(" / ".join(group), fontsize=9)
            fig.tight_layout()
            path = out / f"probe_bars_{'_'.join(group)}.{spec.image_format}"
            _save(fig, path, spec.image_format)
        report.figures.append(FigureReport(path, group, panels))
    return report


def _render_early_evidence(spec: FigureSpec, results_csv, out: Path) -> RenderReport:
    results = read_csv(results_csv)
    needed = {"run_id", "optimizer", "regularizer", "task_id", "param_norm",
              "metric_completion", *spec.group_by}
    _require_columns("results.csv", results, needed, _fieldnames(results_csv))
    report = RenderReport()

    rows = [r for r in results
            if spec.regularizer_filter is None or r["regularizer"] in spec.regularizer_filter]
    if not rows:
        report.warnings.append("no result rows left after filtering; nothing to draw")
        return report

    groups = sorted({_group_key(r, spec.group_by) for r in rows})
    for group in groups:
        grp = sorted((r for r in rows if _group_key(r, spec.group_by) == group),
                     key=lambda r: (r["optimizer"], r["regularizer"], int(r["task_id"])))
        # pair regularized rows with their unregularized sibling per (optimizer, task)
        plain_norm = {(r["optimizer"], r["task_id"]): float(r["param_norm"])
                      for r in grp if r["regularizer"] == "none"}
        with plt.rc_context(STYLE):
            fig, (ax_norm, ax_r2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
            xs = range(len(grp))
            norm_texts = [r["param_norm"] for r in grp]
            r2_texts = [r["metric_completion"] for r in grp]
            for x, r in zip(xs, grp):
                ax_norm.bar([x], [float(r["param_norm"])], **_bar_style(r["regularizer"]))
                base = plain_norm.get((r["optimizer"], r["task_id"]))
                if r["regularizer"] != "none" and base:
                    pct = 100.0 * (1.0 - float(r["param_norm"]) / base)
                    ax_norm.annotate(f"-{pct:.0f}%", (x, float(r["param_norm"])),
                                     fontsize=4, ha="center", va="top", color="#b30000")
            _annotate_bars(ax_norm, xs, [float(t) for t in norm_texts], norm_texts)
            ax_norm.set_yscale("log")
            ax_norm.set_ylabel("parameter L2 norm")
            for x, r in zip(xs, grp):
                ax_r2.bar([x], [float(r["metric_completion"])], **_bar_style(r["regularizer"]))
            _annotate_bars(ax_r2, xs, [float(t) for t in r2_texts], r2_texts)
            ax_r2.set_ylabel("R²")
            for ax in (ax_norm, ax_r2):
                ax.set_xticks(list(xs))
                ax.set_xticklabels([f"{r['optimizer']}/{r['regularizer']}/t{r['task_id']}"
                                    for r in grp], rotation=90, fontsize=4)
            fig.suptitle(" / ".join(group), fontsize=9)
            fig.tight_layout()
            path = out / f"early_evidence_{'_'.join(group)}.{spec.image_format}"
            _save(fig, path, spec.image_format)
        report.figures.append(FigureReport(path, group, [
            PanelReport("param_norm", len(grp), norm_texts),
            PanelReport("r2", len(grp), r2_texts),
        ]))
    return report

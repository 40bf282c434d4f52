"""plotviz command line: CSVs in, figures out.

    plotviz --kind probe_bars --results results.csv --probes probes.csv --out figs \
            [--radius 0.01 ...] [--stage at_completion ...] [--probe-metric max_loss] \
            [--regularizer none --regularizer sam] [--format svg|png]
    plotviz --kind early_evidence --results results.csv --out figs
    plotviz --spec spec.json --results ... --out figs

Warnings (empty groups, orphan rows) go to stderr and do not fail the run;
exit code 1 is reserved for real errors (missing columns, bad filters).
"""

from __future__ import annotations

import argparse
import json
import sys

from .render import FigureKind, FigureSpec, RenderError, render


def build_spec(args) -> FigureSpec:
    fields: dict = {}
    if args.spec:
        fields.update(json.loads(open(args.spec).read()))
        if "figure_kind" in fields:
            fields["figure_kind"] = FigureKind(fields["figure_kind"])
        for key in ("group_by", "radius_filter", "stage_filter", "regularizer_filter"):
            if fields.get(key) is not None:
                fields[key] = tuple(fields[key])
    if args.kind:
        fields["figure_kind"] = FigureKind(args.kind)
    if args.radius:
        fields["radius_filter"] = tuple(args.radius)
    if args.stage:
        fields["stage_filter"] = tuple(args.stage)
    if args.regularizer:
        fields["regularizer_filter"] = tuple(args.regularizer)
    if args.probe_metric:
        fields["probe_metric"] = args.probe_metric
    if args.format:
        fields["image_format"] = args.format
    if "figure_kind" not in fields:
        raise RenderError("--kind (or a spec file with figure_kind) is required")
    return FigureSpec(**fields)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plotviz", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--results", required=True, help="results.csv path")
    parser.add_argument("--probes", help="probes.csv path (probe_bars)")
    parser.add_argument("--out", default="figures", help="output directory")
    parser.add_argument("--kind", choices=[k.value for k in FigureKind])
    parser.add_argument("--spec", help="FigureSpec as JSON")
    parser.add_argument("--radius", action="append", type=float)
    parser.add_argument("--stage", action="append")
    parser.add_argument("--regularizer", action="append")
    parser.add_argument("--probe-metric", choices=["max_loss", "grad_norm"])
    parser.add_argument("--format", choices=["svg", "png"])
    args = parser.parse_args(argv)

    try:
        spec = build_spec(args)
        report = render(spec, args.results, args.out, probes_csv=args.probes)
    except (RenderError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for fig in report.figures:
        print(f"{fig.path} ({fig.bars} bars: "
              + ", ".join(f"{p.label}={p.bars}" for p in fig.panels) + ")")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(report.figures)} figure(s), {len(report.warnings)} warning(s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())

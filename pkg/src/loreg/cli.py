"""Command-line interface.

Subcommands:
  meta-train      train learned optimizers (one checkpoint per regularizer)
  meta-test       run the classification matrix against saved checkpoints
  probe           sharpness-probe saved optimizee parameters
  early-evidence  the four-arm L2 regression study
  report          turn accumulated records into results.csv/probes.csv/summary.md

Every command takes --config (JSON with "experiment" and "meta" sections),
--out, and an optional --seed override. The dataset directory comes from
--data-dir or the LOREG_DATA_DIR environment variable. Exit code is 0 only
when every scheduled run completed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import harness
from .meta_training import MetaConfig, Regularizer, train_meta
from .optimizer import save_lo
from .rng import RngStream


def _load_configs(args) -> tuple[harness.ExperimentConfig, MetaConfig]:
    if args.config:
        exp, meta = harness.load_config(args.config)
    else:
        exp, meta = harness.ExperimentConfig(), MetaConfig()
    if args.seed is not None:
        exp = dataclasses.replace(exp, seed=args.seed)
        meta = dataclasses.replace(meta, seed=args.seed)
    if getattr(args, "data_dir", None):
        exp = dataclasses.replace(exp, data_dir=args.data_dir)
    if getattr(args, "samples_per_split", None):
        exp = dataclasses.replace(exp, samples_per_split=args.samples_per_split)
    if getattr(args, "num_runs", None):
        exp = dataclasses.replace(exp, num_runs=args.num_runs)
    if getattr(args, "max_meta_steps", None):
        meta = dataclasses.replace(meta, max_meta_steps_per_stage=args.max_meta_steps)
    return exp, meta


def _sampler_for_training(exp: harness.ExperimentConfig, meta: MetaConfig, rng: RngStream):
    name = exp.datasets[0]
    if name == "cubic":
        from .meta_training import PolyTaskSampler
        return PolyTaskSampler(exp.poly_family())
    meta_train_ds, _, _ = harness.load_split_datasets(name, exp, rng.child(f"data/{name}"))
    spec = harness.spec_for(exp.architectures[0], meta_train_ds)
    data = harness._with_channel(spec, meta_train_ds)
    from .meta_training import FixedDataSampler
    return FixedDataSampler(spec, data)


def cmd_meta_train(args) -> int:
    exp, meta = _load_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    regs = [args.regularizer] if args.regularizer else list(exp.regularizers)
    rng = RngStream(exp.seed)
    sampler = _sampler_for_training(exp, meta, rng)
    for reg in regs:
        cfg = dataclasses.replace(meta, regularizer=Regularizer(reg))
        result = train_meta(cfg, sampler, rng.child(f"meta-train/{reg}"))
        save_lo(result.optimizer, out / f"lo_{reg}.bin")
        save_lo(result.final_optimizer, out / f"lo_{reg}_final.bin")
        log_path = out / f"train_log_{reg}.jsonl"
        log_path.write_text("".join(json.dumps(r.as_dict(), sort_keys=True) + "\n"
                                    for r in result.log))
        print(f"meta-train[{reg}]: {sum(r.kind == 'step' for r in result.log)} meta-steps "
              f"-> {out / f'lo_{reg}.bin'} (+ final)")
    return 0


def cmd_meta_test(args) -> int:
    exp, meta = _load_configs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    checkpoints = {}
    for reg in exp.regularizers:
        checkpoints[reg] = str(out / f"lo_{reg}.bin")
    for spec in args.checkpoint or []:
        reg, _, path = spec.partition("=")
        checkpoints[reg] = path
    records, probe_rows = harness.run_classification_matrix(
        exp, RngStream(exp.seed), checkpoints, out)
    for r in records:
        harness.append_jsonl(out / "records.jsonl", dataclasses.asdict(r))
    for row in probe_rows:
        harness.append_jsonl(out / "probes.jsonl", {"row": row})
    paths = harness.emit_reports(records, probe_rows, out,
                                 harness.effective_config_dict(exp, meta),
                                 harness.config_hash(exp, meta))
    print(f"meta-test: {len(records)} runs -> {paths['results']}")
    return 0


def cmd_probe(args) -> int:
    exp, meta = _load_configs(args)
    if args.theta:
        exp = dataclasses.replace(exp, theta_checkpoints=tuple(args.theta),
                                  experiment_kind=harness.ExperimentKind.PROBE_ONLY)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = harness.run_probe_only(exp, RngStream(exp.seed))
    harness.write_csv(out / "probes.csv", harness.PROBE_COLUMNS, rows)
    print(f"probe: {len(rows)} probe rows -> {out / 'probes.csv'}")
    return 0


def cmd_early_evidence(args) -> int:
    exp, meta = _load_configs(args)
    exp = dataclasses.replace(exp, experiment_kind=harness.ExperimentKind.EARLY_EVIDENCE_L2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, summary = harness.run_early_evidence(exp, meta, RngStream(exp.seed), out)
    for r in records:
        harness.append_jsonl(out / "records.jsonl", dataclasses.asdict(r))
    (out / "early_evidence_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    paths = harness.emit_reports(records, [], out,
                                 harness.effective_config_dict(exp, meta),
                                 harness.config_hash(exp, meta))
    print(f"early-evidence: {len(records)} arm runs -> {paths['results']}")
    print(json.dumps(summary["mean_norms"], sort_keys=True))
    return 0


def cmd_report(args) -> int:
    exp, meta = _load_configs(args)
    out = Path(args.out)
    records_path = out / "records.jsonl"
    if not records_path.exists():
        print(f"no records at {records_path}", file=sys.stderr)
        return 1
    records = [harness.RunRecord(**json.loads(line))
               for line in records_path.read_text().splitlines() if line.strip()]
    probe_rows = []
    probes_path = out / "probes.jsonl"
    if probes_path.exists():
        probe_rows = [json.loads(line)["row"]
                      for line in probes_path.read_text().splitlines() if line.strip()]
    paths = harness.emit_reports(records, probe_rows, out,
                                 harness.effective_config_dict(exp, meta),
                                 harness.config_hash(exp, meta))
    print(f"report: {len(records)} records -> {paths['results']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loreg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="override both experiment and meta seeds")
        p.add_argument("--data-dir", help="dataset directory (or set LOREG_DATA_DIR)")
        p.add_argument("--samples-per-split", type=int, help="desk-scale cap per split")
        p.add_argument("--num-runs", type=int, help="override run count")

    p = sub.add_parser("meta-train", help="train learned optimizers")
    common(p)
    p.add_argument("--regularizer", choices=[r.value for r in Regularizer])
    p.add_argument("--max-meta-steps", type=int, help="cap meta-steps per curriculum stage")
    p.set_defaults(fn=cmd_meta_train)

    p = sub.add_parser("meta-test", help="run the classification matrix")
    common(p)
    p.add_argument("--checkpoint", action="append", metavar="REG=PATH",
                   help="override checkpoint path for a regularizer")
    p.set_defaults(fn=cmd_meta_test)

    p = sub.add_parser("probe", help="probe saved optimizee parameters")
    common(p)
    p.add_argument("--theta", action="append", help="optimizee .npz checkpoint path")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("early-evidence", help="L2 regression study")
    common(p)
    p.set_defaults(fn=cmd_early_evidence)

    p = sub.add_parser("report", help="emit CSVs and summary from records")
    common(p)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

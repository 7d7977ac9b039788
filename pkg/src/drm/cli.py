"""Command line entry point: ``drm <command> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


def _experiment(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()


def _load_items(cfg, data_dir, tables, split):
    from .synthgraph import load_split
    from .training import prepare_items

    _, samples = load_split(Path(data_dir) / f"{split}.json")
    return prepare_items(samples, tables, cfg.seed), samples


def _from_checkpoint(path):
    from .training import load_checkpoint

    model, tables, ckpt_cfg = load_checkpoint(path)
    cfg = ExperimentConfig.from_json(ckpt_cfg["experiment"])
    return model, tables, cfg


def cmd_data_generate(args) -> int:
    from .synthgraph import DatasetSpec, default_spec, frequency_table, generate_dataset, save_dataset

    if args.spec:
        doc = json.loads(Path(args.spec).read_text())
        spec = DatasetSpec.from_json(doc) if "triplet_compatibility" in doc else default_spec(**doc)
        spec.validate()
    else:
        spec = default_spec()
    ds = generate_dataset(spec, args.seed)
    save_dataset(ds, args.out)
    freq = frequency_table(ds.splits["train"], spec.num_predicate_categories)
    print(f"wrote {args.out}: " + ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items()))
    print("train predicate counts: " + " ".join(f"{p}:{c}" for p, c in sorted(freq.predicate_counts.items())))
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .model import DRMModel
    from .pipeline import build_tables, check_dataset
    from .synthgraph import load_dataset
    from .training import prepare_items, save_checkpoint, train_stage1

    cfg = _experiment(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    ds = load_dataset(args.data)
    check_dataset(cfg, ds)
    tables = build_tables(cfg)
    train = prepare_items(ds.splits["train"], tables, cfg.seed)
    val = prepare_items(ds.splits["val"], tables, cfg.seed)
    torch.manual_seed(cfg.seed)
    model = DRMModel(cfg.resolved_model(), torch.as_tensor(tables.semantic))
    records = train_stage1(model, train, val, tables, cfg.resolved_train(), cfg.seed,
                           on_epoch=lambda r: print(json.dumps(r, sort_keys=True), flush=True))
    save_checkpoint(args.out, model, tables, {"experiment": cfg.to_json()}, cfg.seed)
    print(f"wrote {args.out} after {len(records)} epochs")
    return EXIT_OK


def _dkt_setup(args):
    from .pipeline import plan_dkt
    from .synthgraph import frequency_table

    model, tables, cfg = _from_checkpoint(args.checkpoint)
    if args.mode:
        cfg.dkt.mode = args.mode
    if args.threshold is not None:
        cfg.dkt.threshold = args.threshold
    if cfg.dkt.mode == "none":
        raise UsageError("knowledge transfer mode is 'none'; pass --mode P, T or PT")
    items, samples = _load_items(cfg, args.data, tables, "train")
    freq = frequency_table(samples, model.cfg.num_predicates)
    plan, real = plan_dkt(model, items, tables, freq, cfg)
    return model, tables, cfg, plan, real


def cmd_dkt_calibrate(args) -> int:
    from .dkt import dump_stats

    _, _, _, plan, _ = _dkt_setup(args)
    dump_stats(plan, args.out)
    print(f"wrote {args.out}: Q={plan.q} head={plan.split.head_predicates} tail={plan.split.tail_predicates}")
    return EXIT_OK


def cmd_dkt_finetune(args) -> int:
    from .pipeline import apply_dkt
    from .training import save_checkpoint

    model, tables, cfg, plan, real = _dkt_setup(args)
    if args.epochs is not None:
        cfg.dkt.finetune.epochs = args.epochs
    balanced, records = apply_dkt(model, real, plan, cfg)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    save_checkpoint(args.out, model, tables, {"experiment": cfg.to_json()}, cfg.seed)
    print(f"wrote {args.out}: {len(balanced.labels)} records, {int(balanced.synthetic.sum())} synthetic")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import write_predictions
    from .pipeline import evaluate_model
    from .synthgraph import frequency_table, load_split

    model, tables, cfg = _from_checkpoint(args.checkpoint)
    task = args.task or cfg.task
    items, _ = _load_items(cfg, args.data, tables, args.split)
    _, train_samples = load_split(Path(args.data) / "train.json")
    report, preds = evaluate_model(model, items, tables, task, frequency_table(train_samples, model.cfg.num_predicates))
    if args.predictions:
        write_predictions(preds, args.predictions)
    doc = report.to_json()
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for k, v in doc["values"].items():
        print(f"{k}\t{v:.2f}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = ExperimentConfig.load(args.config)
    if args.run_id:
        cfg.run_id = args.run_id
    result = run_pipeline(cfg, args.out_root, plots=not args.no_plots)
    print(f"run directory: {result.run_dir}")
    for stage, rep in result.reports.items():
        v = rep.values
        print(f"{stage}\tR@50={100 * v['R@50']:.2f}\tmR@50={100 * v['mR@50']:.2f}\tF@50={100 * v['F@50']:.2f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import RunResult
    from .report import emit_report

    results = [RunResult.load(r) for r in args.runs]
    text, doc = emit_report(results, args.stage)
    sys.stdout.write(text)
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .pipeline import RunResult
    from .plotting import emit_plots

    for name, path in emit_plots(RunResult.load(args.run), args.out).items():
        print(f"{name}\t{path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drm", description="Scene-graph relation model with tail knowledge transfer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthetic dataset tools").add_subparsers(dest="data_command", required=True)
    gen = data.add_parser("generate", help="generate train/val/test splits")
    gen.add_argument("--spec", help="JSON dataset spec, or keyword overrides for the default spec")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_data_generate)

    tr = sub.add_parser("train", help="stage-1 training")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--epochs", type=int)
    tr.set_defaults(func=cmd_train)

    dk = sub.add_parser("dkt", help="knowledge transfer").add_subparsers(dest="dkt_command", required=True)
    for name, func, help_ in (("calibrate", cmd_dkt_calibrate, "estimate and calibrate class Gaussians"),
                              ("finetune", cmd_dkt_finetune, "fine-tune the relation classifier on a balanced set")):
        c = dk.add_parser(name, help=help_)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--mode", choices=("P", "T", "PT"))
        c.add_argument("--threshold", type=int)
        if name == "finetune":
            c.add_argument("--epochs", type=int)
        c.set_defaults(func=func)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--task", choices=("PredCls", "SGCls"))
    ev.add_argument("--out")
    ev.add_argument("--predictions")
    ev.set_defaults(func=cmd_eval)

    run = sub.add_parser("run", help="full two-stage pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--out-root", default="runs")
    run.add_argument("--run-id")
    run.add_argument("--no-plots", action="store_true")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="comparison table over run directories")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--stage", choices=("stage1", "stage2"))
    rep.add_argument("--json")
    rep.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="render figures for a run directory")
    pl.add_argument("run")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .dkt import DKTError
    from .metrics import MetricsError
    from .plotting import PlotError
    from .report import ReportError
    from .synthgraph import DatasetError

    try:
        return args.func(args)
    except (ConfigError, DatasetError, MetricsError, ReportError, PlotError, UsageError, DKTError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"drm: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"drm: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

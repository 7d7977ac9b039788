"""Two-stage pipeline: data, stage-1 training, evaluation, knowledge transfer, re-evaluation.

Everything a run produces lands in one directory::

    config.json  stage1.ckpt  stats.json  stage2.ckpt  predictions_{stage}.jsonl
    report.json  train_log.jsonl  timing.json  features_test.npz  plots/
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dkt
from .analysis import cluster_margin
from .batching import decode_triplet
from .config import ConfigError, ExperimentConfig
from .featurizer import EmbeddingTables, make_tables
from .metrics import MetricsReport, evaluate, write_predictions
from .model import DRMModel
from .synthgraph import Dataset, FrequencyTable, default_spec, frequency_table, generate_dataset, load_dataset, \
    save_dataset
from .training import Item, extract_features, frozen_hashes, ground_truth, predict, prepare_items, save_checkpoint, \
    train_stage1

log = logging.getLogger(__name__)

RUN_DIR_ENV = "DRM_RUN_DIR"


@dataclass
class RunResult:
    config: dict
    input_hash: str
    reports: dict[str, MetricsReport]
    train_log: list[dict]
    finetune_log: list[dict] = field(default_factory=list)
    cluster: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    frozen_hashes: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    run_dir: str = ""

    def report_json(self) -> dict:
        """Deterministic part of the result (no timings, no paths)."""
        return {
            "config": self.config,
            "input_hash": self.input_hash,
            "reports": {k: v.to_json() for k, v in self.reports.items()},
            "train_log": self.train_log,
            "finetune_log": self.finetune_log,
            "cluster": self.cluster,
            "transfer": self.transfer,
            "frozen_hashes": self.frozen_hashes,
        }

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunResult":
        run_dir = Path(run_dir)
        path = run_dir / "report.json"
        if not path.exists():
            raise FileNotFoundError(f"{run_dir}: no report.json")
        doc = json.loads(path.read_text())
        timing = run_dir / "timing.json"
        wall = json.loads(timing.read_text())["wall_clock"] if timing.exists() else 0.0
        return cls(
            config=doc["config"],
            input_hash=doc["input_hash"],
            reports={k: MetricsReport.from_json(v) for k, v in doc["reports"].items()},
            train_log=doc["train_log"],
            finetune_log=doc.get("finetune_log", []),
            cluster=doc.get("cluster", {}),
            transfer=doc.get("transfer", {}),
            frozen_hashes=doc.get("frozen_hashes", {}),
            wall_clock=wall,
            run_dir=str(run_dir),
        )

    @property
    def run_id(self) -> str:
        return self.config.get("run_id", Path(self.run_dir).name)

    @property
    def final(self) -> MetricsReport:
        return self.reports["stage2"] if "stage2" in self.reports else self.reports["stage1"]


def output_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get(RUN_DIR_ENV) or default)


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def input_hash(cfg: ExperimentConfig, dataset: Dataset) -> str:
    """Content hash of everything that determines the outcome (the run label excluded)."""
    h = hashlib.sha256()
    doc = cfg.to_json()
    doc.pop("run_id")
    h.update(json.dumps(doc, sort_keys=True).encode())
    h.update(json.dumps(dataset.spec.to_json(), sort_keys=True).encode())
    for split in sorted(dataset.splits):
        for s in dataset.splits[split]:
            h.update(repr(s).encode())
    return h.hexdigest()


def load_data(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    spec = default_spec(num_entity_categories=cfg.model.num_entity_classes,
                        num_predicate_categories=cfg.model.num_predicates, **cfg.dataset)
    return generate_dataset(spec, cfg.effective_data_seed)


def build_tables(cfg: ExperimentConfig) -> EmbeddingTables:
    m = cfg.model
    return make_tables(m.num_entity_classes, m.d_v, m.d_s, m.d_u, seed=cfg.seed)


def check_dataset(cfg: ExperimentConfig, dataset: Dataset) -> None:
    spec = dataset.spec
    c_e, c_p = spec.num_entity_categories, spec.num_predicate_categories
    if c_e != cfg.model.num_entity_classes or c_p != cfg.model.num_predicates:
        raise ConfigError(
            f"dataset has {c_e} entity / {c_p} predicate classes, "
            f"model expects {cfg.model.num_entity_classes} / {cfg.model.num_predicates}"
        )


def evaluate_model(model: DRMModel, items: list[Item], tables: EmbeddingTables, task: str,
                   freq: FrequencyTable):
    preds = predict(model, items, tables, task)
    report = evaluate(preds, ground_truth(items), task, model.cfg.num_predicates,
                      train_predicate_counts=freq.predicate_counts,
                      train_triplets=set(freq.triplet_counts))
    return report, preds


def relation_features(model: DRMModel, items: list[Item], tables: EmbeddingTables, task: str) -> dict:
    """Relation features with triplet labels decoded to (s, p, o) keys."""
    f = extract_features(model, items, tables, task)
    c_p, c_e = model.cfg.num_predicates, model.cfg.num_entity_classes
    f["triplet"] = np.asarray([decode_triplet(k, c_p, c_e) for k in f["triplet"]], dtype=np.int64).reshape(-1, 3)
    return f


def plan_dkt(model: DRMModel, items: list[Item], tables: EmbeddingTables, freq: FrequencyTable,
             cfg: ExperimentConfig, mode: str | None = None):
    real = relation_features(model, items, tables, cfg.task)
    plan = dkt.plan_transfer(real, freq, model.cfg.num_predicates, cfg.dkt.threshold, mode or cfg.dkt.mode,
                             cfg.dkt.q_override, cfg.dkt.eps)
    return plan, real


def apply_dkt(model: DRMModel, real: dict, plan: dkt.DKTPlan, cfg: ExperimentConfig):
    balanced = dkt.build_balanced_set(real, plan, cfg.seed, cfg.dkt.eps)
    log_records = dkt.finetune_classifier(model, balanced, cfg.dkt.finetune, cfg.seed)
    return balanced, log_records


def run_pipeline(cfg: ExperimentConfig, out_root: str | Path | None = None, plots: bool = True) -> RunResult:
    cfg.validate()
    start = time.perf_counter()
    run_dir = output_root(out_root or "runs") / cfg.run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.json")

    dataset = load_data(cfg)
    check_dataset(cfg, dataset)
    if not cfg.dataset_path:
        save_dataset(dataset, run_dir / "data")
    tables = build_tables(cfg)
    train_items = prepare_items(dataset.splits["train"], tables, cfg.seed)
    val_items = prepare_items(dataset.splits["val"], tables, cfg.seed)
    test_items = prepare_items(dataset.splits["test"], tables, cfg.seed)
    freq = frequency_table(dataset.splits["train"], cfg.model.num_predicates)

    torch.manual_seed(cfg.seed)
    model = DRMModel(cfg.resolved_model(), torch.as_tensor(tables.semantic))
    log_path = run_dir / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(record):
        with log_path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    train_log = train_stage1(model, train_items, val_items, tables, cfg.resolved_train(), cfg.seed, on_epoch)
    ckpt_cfg = {"experiment": cfg.to_json()}
    save_checkpoint(run_dir / "stage1.ckpt", model, tables, ckpt_cfg, cfg.seed)

    result = RunResult(config=cfg.to_json(), input_hash=input_hash(cfg, dataset), reports={}, train_log=train_log,
                       run_dir=str(run_dir))
    report, preds = evaluate_model(model, test_items, tables, cfg.task, freq)
    write_predictions(preds, run_dir / "predictions_stage1.jsonl")
    result.reports["stage1"] = report

    # projected representations (p'', t'') of the test relations after stage 1
    feats = relation_features(model, test_items, tables, cfg.task)
    np.savez(run_dir / "features_test.npz", p_proj=feats["p_proj"], t_proj=feats["t_proj"],
             predicate=feats["predicate"], triplet=feats["triplet"])
    for name, rep, lab in (("p", "p_proj", "predicate"), ("t", "t_proj", "triplet")):
        try:
            result.cluster[name] = cluster_margin(feats[rep], feats[lab])
        except ValueError as exc:
            log.warning("cluster statistic for %s skipped: %s", name, exc)

    if cfg.dkt.mode != "none":
        plan, real = plan_dkt(model, train_items, tables, freq, cfg)
        dkt.dump_stats(plan, run_dir / "stats.json")
        before = frozen_hashes(model)
        balanced, result.finetune_log = apply_dkt(model, real, plan, cfg)
        after = frozen_hashes(model)
        save_checkpoint(run_dir / "stage2.ckpt", model, tables, ckpt_cfg, cfg.seed)
        report, preds = evaluate_model(model, test_items, tables, cfg.task, freq)
        write_predictions(preds, run_dir / "predictions_stage2.jsonl")
        result.reports["stage2"] = report
        result.frozen_hashes = {"stage1": before, "stage2": after}
        result.transfer = {
            "q": plan.q,
            "head_predicates": plan.split.head_predicates,
            "tail_predicates": plan.split.tail_predicates,
            "counts": balanced.counts(cfg.model.num_predicates).tolist(),
            "synthetic": int(balanced.synthetic.sum()),
        }

    _dump_json(run_dir / "report.json", result.report_json())
    result.wall_clock = time.perf_counter() - start
    _dump_json(run_dir / "timing.json", {"wall_clock": result.wall_clock})
    if plots:
        from .plotting import emit_plots

        emit_plots(result)
    return result


def tail_mean_recall(report: MetricsReport, tail_predicates) -> float:
    per = {d["predicate"]: d["recall"] for d in report.per_class["predicates"]}
    vals = [per[p] for p in tail_predicates if p in per]
    if not vals:
        raise ValueError("no tail predicate has test ground truth")
    return float(np.mean(vals))

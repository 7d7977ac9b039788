"""Stage-1 training loop, inference and checkpoint I/O."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .batching import GraphBatch, collate, concat_batches
from .featurizer import EmbeddingTables, FeatureBundle, featurize, proposal_labels
from .losses import LossWeights, NonFiniteLossError, loss_terms, total_loss
from .metrics import GroundTruth, SamplePrediction, evaluate
from .model import DRMModel, ModelConfig
from .synthgraph import SceneGraphSample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "drm-v1"

Item = tuple[SceneGraphSample, FeatureBundle]


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    batch_size: int = 16
    augment: bool = True
    noise_std: float = 0.05
    drop_p: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    task: str = "PredCls"
    eval_every: int = 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_json()
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "weights" in doc:
            doc["weights"] = LossWeights(**doc["weights"])
        return cls(**doc)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good_state: dict, log_records: list):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.log_records = log_records


def prepare_items(samples: list[SceneGraphSample], tables: EmbeddingTables, seed: int = 0) -> list[Item]:
    return [(s, featurize(s, tables, seed)) for s in samples]


def input_labels_for(items: list[Item], tables: EmbeddingTables, task: str) -> list[np.ndarray] | None:
    """PredCls feeds ground-truth labels to the entity encoder; SGCls feeds proposal labels."""
    if task == "PredCls":
        return None
    return [proposal_labels(b, tables) for _, b in items]


def make_batch(items: list[Item], model_cfg: ModelConfig, tables: EmbeddingTables, task: str,
               dtype=torch.float32) -> GraphBatch:
    return collate(items, model_cfg.num_predicates, model_cfg.num_entity_classes,
                   input_labels_for(items, tables, task), dtype=dtype)


def two_view_augment(batch: GraphBatch, seed: int, noise_std: float = 0.05, drop_p: float = 0.1):
    """Two label-preserving views via independent Gaussian noise and feature dropout."""
    gen = torch.Generator().manual_seed(int(seed))

    def view(x: torch.Tensor) -> torch.Tensor:
        out = x
        if noise_std > 0:
            out = out + noise_std * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        if drop_p > 0:
            keep = torch.rand(x.shape, generator=gen) >= drop_p
            out = out * keep.to(x.dtype) / (1.0 - drop_p)
        return out

    a = batch.with_features(view(batch.ent_feat), view(batch.union))
    b = batch.with_features(view(batch.ent_feat), view(batch.union))
    return a, b


def split_views(out: dict, batch: GraphBatch) -> tuple[dict, dict]:
    n, m = batch.ent_feat.shape[0], batch.union.shape[0]
    a, b = {}, {}
    for k, v in out.items():
        cut = n if k in ("v_prime", "ent_logits") else m
        a[k], b[k] = v[:cut], v[cut:]
    return a, b


def step_loss(model: DRMModel, batch: GraphBatch, cfg: TrainConfig, aug_seed: int):
    if cfg.augment:
        view_a, view_b = two_view_augment(batch, aug_seed, cfg.noise_std, cfg.drop_p)
        both = concat_batches(view_a, view_b)
        out = model(both, triplet_labels=both.labels)
        out_a, out_b = split_views(out, batch)
    else:
        out_a, out_b = model(batch, triplet_labels=batch.labels), None
    terms = loss_terms(model, out_a, out_b, batch, cfg.weights)
    return total_loss(terms, cfg.weights)


def ground_truth(items: list[Item]) -> list[GroundTruth]:
    return [
        GroundTruth(
            s.sample_id,
            [(r.subject_index, r.object_index, r.predicate_id) for r in s.relations],
            [e.category_id for e in s.entities],
        )
        for s, _ in items
    ]


@torch.no_grad()
def predict(model: DRMModel, items: list[Item], tables: EmbeddingTables, task: str,
            batch_size: int = 64) -> list[SamplePrediction]:
    """Score every (pair, predicate) candidate; SGCls scores include entity confidences."""
    model.eval()
    preds = []
    for start in range(0, len(items), batch_size):
        chunk = items[start : start + batch_size]
        batch = make_batch(chunk, model.cfg, tables, task)
        triplet_labels = batch.labels if task == "PredCls" else None
        out = model(batch, triplet_labels=triplet_labels)
        rel_prob = F.softmax(out["rel_logits"], dim=-1).double().numpy()
        if task == "PredCls":
            ent_labels = batch.labels.numpy()
            ent_score = np.ones(len(ent_labels))
        else:
            ent_prob = F.softmax(out["ent_logits"], dim=-1).double()
            score, lab = ent_prob.max(dim=-1)
            ent_labels, ent_score = lab.numpy(), score.numpy()
        pairs = batch.pairs.numpy()
        n_off = 0
        m_off = 0
        for b, (sample, bundle) in enumerate(chunk):
            n, m = bundle.num_entities, bundle.num_pairs
            triplets = []
            for k in range(m):
                gi, gj = pairs[m_off + k]
                pair_score = ent_score[gi] * ent_score[gj]
                i, j = gi - n_off, gj - n_off
                for p in range(model.cfg.num_predicates):
                    triplets.append((int(i), int(j), p, float(rel_prob[m_off + k, p] * pair_score)))
            preds.append(SamplePrediction(sample.sample_id, triplets, [int(x) for x in ent_labels[n_off : n_off + n]]))
            n_off += n
            m_off += m
    return preds


@torch.no_grad()
def extract_features(model: DRMModel, items: list[Item], tables: EmbeddingTables, task: str = "PredCls",
                     batch_size: int = 64) -> dict[str, np.ndarray]:
    """p', t', projections and labels of every annotated relation (ground-truth semantic labels)."""
    model.eval()
    chunks = {"p_prime": [], "t_prime": [], "p_proj": [], "t_proj": [], "predicate": [], "triplet": []}
    for start in range(0, len(items), batch_size):
        batch = make_batch(items[start : start + batch_size], model.cfg, tables, task)
        out = model(batch, triplet_labels=batch.labels)
        rel = batch.rel_pos
        p, t = out["p_prime"][rel], out["t_prime"][rel]
        pp, tp = model.project(p, t)
        chunks["p_prime"].append(p.double().numpy())
        chunks["t_prime"].append(t.double().numpy())
        chunks["p_proj"].append(pp.double().numpy())
        chunks["t_proj"].append(tp.double().numpy())
        chunks["predicate"].append(batch.rel_labels.numpy())
        chunks["triplet"].append(batch.triplet_labels.numpy())
    return {k: np.concatenate(v) for k, v in chunks.items()}


def train_stage1(
    model: DRMModel,
    train_items: list[Item],
    val_items: list[Item],
    tables: EmbeddingTables,
    cfg: TrainConfig,
    seed: int,
    on_epoch=None,
) -> list[dict]:
    """SGD over mini-batches of samples; returns one log record per epoch."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    records = []
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    val_gt = ground_truth(val_items)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_items))
        sums: dict[str, float] = {}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_items[i] for i in order[start : start + cfg.batch_size]]
            if not any(s.relations for s, _ in chunk):
                continue
            batch = make_batch(chunk, model.cfg, tables, cfg.task)
            try:
                loss, breakdown = step_loss(model, batch, cfg, aug_seed=seed * 1_000_003 + step)
            except NonFiniteLossError as exc:
                model.load_state_dict(last_good)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, records) from exc
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            n_batches += 1
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": epoch}
        record.update({k: sums.get(k, 0.0) / max(n_batches, 1) for k in ("L", "L_e", "L_r", "L_p", "L_t")})
        if val_items and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            preds = predict(model, val_items, tables, "PredCls")
            record["val_mR50"] = evaluate(preds, val_gt, "PredCls", model.cfg.num_predicates, ks=(50,)).values["mR@50"]
        else:
            record["val_mR50"] = None
        records.append(record)
        log.info("epoch %d  L=%.4f  val_mR50=%s", epoch, record["L"], record["val_mR50"])
        last_good = copy.deepcopy(model.state_dict())
        if on_epoch is not None:
            on_epoch(record)
    return records


# ---------------------------------------------------------------- checkpoints


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_hashes(model: DRMModel) -> dict[str, str]:
    return {name: parameter_hash(m) for name, m in model.frozen_modules().items()}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: DRMModel, tables: EmbeddingTables, config: dict, seed: int) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": json.dumps({"model": model.cfg.to_json(), **config}, sort_keys=True),
        "seed": int(seed),
        "state_dict": model.state_dict(),
        "tables": {k: torch.as_tensor(v) for k, v in tables.to_arrays().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    _atomic_write(Path(path), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[DRMModel, EmbeddingTables, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    config = json.loads(payload["config"])
    model_cfg = ModelConfig(**config["model"])
    tables = EmbeddingTables.from_arrays({k: v.numpy() for k, v in payload["tables"].items()})
    model = DRMModel(model_cfg, torch.as_tensor(tables.semantic))
    model.load_state_dict(payload["state_dict"])
    config["seed"] = payload["seed"]
    return model, tables, config

"""Stage-1 relation model: entity encoder, predicate/triplet cue encoders and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import EntityEncoder, HAMasks, HAStack
from .batching import GraphBatch


@dataclass
class ModelConfig:
    num_entity_classes: int = 20
    num_predicates: int = 10
    d_v: int = 64
    d_s: int = 32
    d_u: int = 64
    d_model: int = 64
    num_heads: int = 4
    entity_layers: int = 4
    predicate_layers: int = 2
    triplet_layers: int = 2
    proj_dim: int = 32
    ff_mult: int = 2
    dropout: float = 0.0
    use_predicate_encoder: bool = True
    use_triplet_encoder: bool = True

    def to_json(self) -> dict:
        return asdict(self)


def predicate_masks(batch: GraphBatch) -> HAMasks:
    """Predicates query only their subject/object; entities query only incident predicates."""
    sizes = torch.bincount(batch.ent_sample, minlength=batch.num_samples)[batch.pair_sample]
    if bool((batch.local_pairs < 0).any()) or bool((batch.local_pairs >= sizes[:, None]).any()):
        raise ValueError("a pair references an entity outside its sample")
    return HAMasks(
        sa_x=batch.pair_mask(),
        sa_y=batch.entity_mask(),
        ca_xy=batch.predicate_to_entity_mask(),
        ca_yx=batch.entity_to_predicate_mask(),
    )


class PredicateCueEncoder(nn.Module):
    def __init__(self, d_u: int, d_e: int, d_model: int, num_heads: int, num_layers: int = 2,
                 ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.in_x = nn.Linear(d_u, d_model)
        self.in_y = nn.Linear(d_e, d_model)
        self.stack = HAStack(num_layers, d_model, num_heads, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(d_model)

    def forward(self, p, e, masks: HAMasks, return_weights: bool = False):
        x, y, weights = self.stack(self.in_x(p), self.in_y(e), masks, return_weights=True)
        # p' is the predicate-stream output of the last layer
        x = self.out_norm(x)
        return (x, weights) if return_weights else x


class TripletCueEncoder(nn.Module):
    def __init__(self, d_t: int, d_sem: int, d_model: int, num_heads: int, num_layers: int = 2,
                 ff_mult: int = 2, dropout: float = 0.0):
        super().__init__()
        self.in_x = nn.Linear(d_t, d_model)
        self.in_y = nn.Linear(d_sem, d_model)
        self.stack = HAStack(num_layers, d_model, num_heads, ff_mult, dropout)
        self.out_norm = nn.LayerNorm(d_model)

    def forward(self, t, sem_pairs, same_sample: torch.Tensor | None = None):
        if t.shape[0] != sem_pairs.shape[0]:
            raise ValueError(f"{t.shape[0]} triplets but {sem_pairs.shape[0]} semantic pairs")
        m = HAMasks(same_sample, same_sample, same_sample, same_sample)
        x, y = self.stack(self.in_x(t), self.in_y(sem_pairs), m)
        return self.out_norm(x + y)


class ProjectionHead(nn.Module):
    def __init__(self, d_in: int, d_out: int = 32):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_out)
        self.fc2 = nn.Linear(d_out, d_out)

    def forward(self, x):
        return F.normalize(self.fc2(F.gelu(self.fc1(x))), dim=-1)


class RelationClassifier(nn.Module):
    """Two fully connected layers over the fused [p', t']."""

    def __init__(self, d_model: int, num_predicates: int):
        super().__init__()
        self.d_model = d_model
        self.fc1 = nn.Linear(2 * d_model, d_model)
        self.fc2 = nn.Linear(d_model, num_predicates)

    def forward(self, p_prime, t_prime):
        if p_prime.shape[-1] != self.d_model or t_prime.shape[-1] != self.d_model:
            raise ValueError(f"classifier expects {self.d_model}-dim inputs")
        return self.fc2(F.gelu(self.fc1(torch.cat([p_prime, t_prime], dim=-1))))


class DRMModel(nn.Module):
    def __init__(self, cfg: ModelConfig, semantic_table: torch.Tensor):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        d_e = d + cfg.d_v
        self.register_buffer("semantic", torch.as_tensor(semantic_table, dtype=torch.float32).clone())
        self.entity_encoder = EntityEncoder(cfg.d_v, cfg.d_s, d, cfg.num_heads, cfg.entity_layers,
                                            cfg.ff_mult, cfg.dropout)
        self.predicate_encoder = PredicateCueEncoder(cfg.d_u, d_e, d, cfg.num_heads, cfg.predicate_layers,
                                                     cfg.ff_mult, cfg.dropout)
        self.triplet_encoder = TripletCueEncoder(2 * d_e + cfg.d_u, 2 * cfg.d_s, d, cfg.num_heads,
                                                 cfg.triplet_layers, cfg.ff_mult, cfg.dropout)
        self.predicate_proj = ProjectionHead(d, cfg.proj_dim)
        self.triplet_proj = ProjectionHead(d, cfg.proj_dim)
        self.relation_classifier = RelationClassifier(d, cfg.num_predicates)
        self.entity_classifier = nn.Linear(d, cfg.num_entity_classes)

    def frozen_modules(self) -> dict[str, nn.Module]:
        """Everything that stays fixed during classifier fine-tuning."""
        return {
            "entity_encoder": self.entity_encoder,
            "predicate_encoder": self.predicate_encoder,
            "triplet_encoder": self.triplet_encoder,
            "predicate_proj": self.predicate_proj,
            "triplet_proj": self.triplet_proj,
            "entity_classifier": self.entity_classifier,
        }

    def forward(self, batch: GraphBatch, triplet_labels: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """Encode a batch.

        ``triplet_labels`` selects the entity labels whose embeddings form the
        semantic stream of the triplet encoder; ``None`` uses the entity
        classifier's own predictions.
        """
        sem = self.semantic.to(batch.ent_feat.dtype)
        v = batch.ent_feat
        v_prime = batch.unpad_entities(
            self.entity_encoder(batch.pad_entities(v), batch.pad_entities(sem[batch.input_labels]),
                                batch.entity_mask())
        )
        ent_logits = self.entity_classifier(v_prime)
        e = torch.cat([v_prime, v], dim=-1)
        u = batch.union
        subj, obj = batch.pairs[:, 0], batch.pairs[:, 1]

        if self.cfg.use_predicate_encoder:
            p_prime = batch.unpad_pairs(
                self.predicate_encoder(batch.pad_pairs(u), batch.pad_entities(e), predicate_masks(batch))
            )
        else:
            p_prime = self.predicate_encoder.out_norm(self.predicate_encoder.in_x(u))

        if self.cfg.use_triplet_encoder:
            if triplet_labels is None:
                triplet_labels = ent_logits.argmax(dim=-1)
            t = torch.cat([e[subj], u, e[obj]], dim=-1)
            sem_pairs = torch.cat([sem[triplet_labels[subj]], sem[triplet_labels[obj]]], dim=-1)
            t_prime = batch.unpad_pairs(
                self.triplet_encoder(batch.pad_pairs(t), batch.pad_pairs(sem_pairs), batch.pair_mask())
            )
        else:
            t_prime = torch.zeros_like(p_prime)

        return {
            "v_prime": v_prime,
            "ent_logits": ent_logits,
            "p_prime": p_prime,
            "t_prime": t_prime,
            "rel_logits": self.relation_classifier(p_prime, t_prime),
        }

    def project(self, p_prime, t_prime):
        return self.predicate_proj(p_prime), self.triplet_proj(t_prime)


def classify_relation(model: DRMModel, p_prime, t_prime):
    return model.relation_classifier(p_prime, t_prime)


def classify_entity(model: DRMModel, v_prime):
    return model.entity_classifier(v_prime)

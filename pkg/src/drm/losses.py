"""Training objectives: supervised contrastive constraint, cross-entropies, weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"loss term {term} is not finite")
        self.term = term


@dataclass
class LossWeights:
    relation: float = 3.0
    entity: float = 0.5
    predicate: float = 0.1
    triplet: float = 0.1
    tau_p: float = 0.2
    tau_t: float = 0.1

    def __post_init__(self):
        for name in ("relation", "entity", "predicate", "triplet"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.tau_p <= 0 or self.tau_t <= 0:
            raise ValueError("temperatures must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def contrastive_loss(reps: torch.Tensor, labels: torch.Tensor, tau: float) -> torch.Tensor:
    """Category-aware supervised contrastive loss over unit-norm ``reps``.

    For each anchor, the log-ratio is averaged over every other batch member
    sharing its label; the denominator runs over the whole batch minus the
    anchor. Anchors without a positive are skipped.
    """
    n = reps.shape[0]
    self_mask = torch.eye(n, dtype=torch.bool)
    logits = (reps @ reps.T / tau).masked_fill(self_mask, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    if not bool(has_pos.any()):
        raise ValueError("contrastive batch has no positive pair")
    per_anchor = -log_prob.masked_fill(~pos, 0.0).sum(dim=1)[has_pos] / n_pos[has_pos]
    return per_anchor.mean()


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of ``L_e``, ``L_r``, ``L_p``, ``L_t``; missing terms count as zero."""
    coef = {"L_e": weights.entity, "L_r": weights.relation, "L_p": weights.predicate, "L_t": weights.triplet}
    total = None
    breakdown = {}
    for name, w in coef.items():
        term = terms.get(name)
        if term is None:
            breakdown[name] = 0.0
            continue
        if not bool(torch.isfinite(term)):
            raise NonFiniteLossError(name)
        breakdown[name] = float(term.detach())
        total = w * term if total is None else total + w * term
    if total is None:
        total = torch.zeros(())
    breakdown["L"] = float(total.detach())
    return total, breakdown


def loss_terms(model, outputs_a: dict, outputs_b: dict | None, batch, weights: LossWeights) -> dict[str, torch.Tensor]:
    """Individual terms for one step; ``outputs_b`` is the second augmented view."""
    views = [outputs_a] if outputs_b is None else [outputs_a, outputs_b]
    rel = batch.rel_pos
    terms = {
        "L_e": sum(F.cross_entropy(o["ent_logits"], batch.labels) for o in views) / len(views),
        "L_r": sum(F.cross_entropy(o["rel_logits"][rel], batch.rel_labels) for o in views) / len(views),
    }
    need_p = weights.predicate > 0 and model.cfg.use_predicate_encoder
    need_t = weights.triplet > 0 and model.cfg.use_triplet_encoder
    if need_p or need_t:
        p_proj, t_proj = zip(*(model.project(o["p_prime"][rel], o["t_prime"][rel]) for o in views))
        if need_p:
            labels = batch.rel_labels.repeat(len(views))
            terms["L_p"] = contrastive_loss(torch.cat(p_proj), labels, weights.tau_p)
        if need_t:
            labels = batch.triplet_labels.repeat(len(views))
            terms["L_t"] = contrastive_loss(torch.cat(t_proj), labels, weights.tau_t)
    return terms

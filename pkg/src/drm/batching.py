"""Collate scene graphs into padded per-sample token blocks.

Entities and pairs are kept both flat (``N`` / ``M`` rows over the whole
batch) and as padded ``(B, L, d)`` blocks for attention. Padded query rows are
allowed to see every key so softmax stays defined; their outputs are dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .featurizer import FeatureBundle
from .synthgraph import SceneGraphSample


@dataclass
class GraphBatch:
    ent_feat: torch.Tensor  # N x d_v
    union: torch.Tensor  # M x d_u
    labels: torch.Tensor  # N ground-truth entity categories
    input_labels: torch.Tensor  # N labels whose embeddings feed the entity encoder
    pairs: torch.Tensor  # M x 2 global entity indices
    ent_sample: torch.Tensor  # N
    ent_pos: torch.Tensor  # N position inside its sample
    pair_sample: torch.Tensor  # M
    pair_pos: torch.Tensor  # M
    local_pairs: torch.Tensor  # M x 2 entity positions inside the sample
    rel_pos: torch.Tensor  # R rows of ``pairs`` that carry a ground-truth relation
    rel_labels: torch.Tensor  # R predicate ids
    sample_ids: list[str]
    num_predicates: int
    num_entity_classes: int

    @property
    def num_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def max_entities(self) -> int:
        return int(self.ent_pos.max()) + 1

    @property
    def max_pairs(self) -> int:
        return int(self.pair_pos.max()) + 1

    @property
    def triplet_labels(self) -> torch.Tensor:
        """Integer triplet type (subject category, predicate, object category) per relation."""
        s = self.labels[self.pairs[self.rel_pos, 0]]
        o = self.labels[self.pairs[self.rel_pos, 1]]
        return (s * self.num_predicates + self.rel_labels) * self.num_entity_classes + o

    # -- padding

    def pad_entities(self, x: torch.Tensor) -> torch.Tensor:
        out = x.new_zeros(self.num_samples, self.max_entities, x.shape[-1])
        out[self.ent_sample, self.ent_pos] = x
        return out

    def unpad_entities(self, x: torch.Tensor) -> torch.Tensor:
        return x[self.ent_sample, self.ent_pos]

    def pad_pairs(self, x: torch.Tensor) -> torch.Tensor:
        out = x.new_zeros(self.num_samples, self.max_pairs, x.shape[-1])
        out[self.pair_sample, self.pair_pos] = x
        return out

    def unpad_pairs(self, x: torch.Tensor) -> torch.Tensor:
        return x[self.pair_sample, self.pair_pos]

    def _valid(self, sample: torch.Tensor, pos: torch.Tensor, length: int) -> torch.Tensor:
        v = torch.zeros(self.num_samples, length, dtype=torch.bool)
        v[sample, pos] = True
        return v

    def entity_valid(self) -> torch.Tensor:
        return self._valid(self.ent_sample, self.ent_pos, self.max_entities)

    def pair_valid(self) -> torch.Tensor:
        return self._valid(self.pair_sample, self.pair_pos, self.max_pairs)

    @staticmethod
    def _mask(allowed: torch.Tensor, query_valid: torch.Tensor) -> torch.Tensor:
        return allowed | ~query_valid[:, :, None]

    def entity_mask(self) -> torch.Tensor:
        """(B, n, n): real entities of the same sample."""
        ev = self.entity_valid()
        return self._mask(ev[:, None, :].expand(-1, ev.shape[1], -1), ev)

    def pair_mask(self) -> torch.Tensor:
        """(B, m, m): real pairs of the same sample."""
        pv = self.pair_valid()
        return self._mask(pv[:, None, :].expand(-1, pv.shape[1], -1), pv)

    def incidence(self) -> torch.Tensor:
        """(B, m, n): True where the entity is the pair's subject or object (real rows only)."""
        inc = torch.zeros(self.num_samples, self.max_pairs, self.max_entities, dtype=torch.bool)
        inc[self.pair_sample, self.pair_pos, self.local_pairs[:, 0]] = True
        inc[self.pair_sample, self.pair_pos, self.local_pairs[:, 1]] = True
        return inc

    def predicate_to_entity_mask(self) -> torch.Tensor:
        return self._mask(self.incidence(), self.pair_valid())

    def entity_to_predicate_mask(self) -> torch.Tensor:
        return self._mask(self.incidence().transpose(1, 2), self.entity_valid())

    def with_features(self, ent_feat: torch.Tensor, union: torch.Tensor) -> "GraphBatch":
        out = GraphBatch(**self.__dict__)
        out.ent_feat, out.union = ent_feat, union
        return out

    def to(self, dtype: torch.dtype) -> "GraphBatch":
        return self.with_features(self.ent_feat.to(dtype), self.union.to(dtype))


def concat_batches(a: GraphBatch, b: GraphBatch) -> GraphBatch:
    """Stack two batches sample-wise (e.g. two augmented views) for a single forward pass."""
    n, m, nb = a.ent_feat.shape[0], a.union.shape[0], a.num_samples
    return GraphBatch(
        ent_feat=torch.cat([a.ent_feat, b.ent_feat]),
        union=torch.cat([a.union, b.union]),
        labels=torch.cat([a.labels, b.labels]),
        input_labels=torch.cat([a.input_labels, b.input_labels]),
        pairs=torch.cat([a.pairs, b.pairs + n]),
        ent_sample=torch.cat([a.ent_sample, b.ent_sample + nb]),
        ent_pos=torch.cat([a.ent_pos, b.ent_pos]),
        pair_sample=torch.cat([a.pair_sample, b.pair_sample + nb]),
        pair_pos=torch.cat([a.pair_pos, b.pair_pos]),
        local_pairs=torch.cat([a.local_pairs, b.local_pairs]),
        rel_pos=torch.cat([a.rel_pos, b.rel_pos + m]),
        rel_labels=torch.cat([a.rel_labels, b.rel_labels]),
        sample_ids=a.sample_ids + b.sample_ids,
        num_predicates=a.num_predicates,
        num_entity_classes=a.num_entity_classes,
    )


def decode_triplet(key: int, num_predicates: int, num_entity_classes: int) -> tuple[int, int, int]:
    rest, o = divmod(int(key), num_entity_classes)
    s, p = divmod(rest, num_predicates)
    return s, p, o


def collate(
    items: list[tuple[SceneGraphSample, FeatureBundle]],
    num_predicates: int,
    num_entity_classes: int,
    input_labels: list[np.ndarray] | None = None,
    dtype: torch.dtype = torch.float32,
) -> GraphBatch:
    ent, uni, lab, inp, pairs, lpairs, es, ep, ps, pp, rpos, rlab, ids = ([] for _ in range(13))
    n_off = m_off = 0
    for b, (sample, bundle) in enumerate(items):
        n, m = bundle.num_entities, bundle.num_pairs
        ent.append(bundle.entity_features)
        uni.append(bundle.union)
        lab.append(bundle.labels)
        inp.append(bundle.labels if input_labels is None else input_labels[b])
        pairs.append(bundle.pair_index + n_off)
        lpairs.append(bundle.pair_index)
        es.append(np.full(n, b))
        ep.append(np.arange(n))
        ps.append(np.full(m, b))
        pp.append(np.arange(m))
        # ordered pair (i, j) sits at row i*(n-1) + j - (j > i)
        for r in sample.relations:
            i, j = r.subject_index, r.object_index
            rpos.append(m_off + i * (n - 1) + j - (1 if j > i else 0))
            rlab.append(r.predicate_id)
        ids.append(sample.sample_id)
        n_off += n
        m_off += m

    def long(x):
        return torch.as_tensor(np.concatenate(x), dtype=torch.long)

    return GraphBatch(
        ent_feat=torch.as_tensor(np.concatenate(ent), dtype=dtype),
        union=torch.as_tensor(np.concatenate(uni), dtype=dtype),
        labels=long(lab),
        input_labels=long(inp),
        pairs=long(pairs),
        ent_sample=long(es),
        ent_pos=long(ep),
        pair_sample=long(ps),
        pair_pos=long(pp),
        local_pairs=long(lpairs),
        rel_pos=torch.as_tensor(np.array(rpos, dtype=np.int64)),
        rel_labels=torch.as_tensor(np.array(rlab, dtype=np.int64)),
        sample_ids=ids,
        num_predicates=num_predicates,
        num_entity_classes=num_entity_classes,
    )

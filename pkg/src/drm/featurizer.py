"""Feature initialisation standing in for a frozen detector backbone.

Entity feature ``v`` = [appearance (d_v - 9) | spatial encoding (9)].
Union feature ``u`` = [relative spatial (8) | union-box spatial (9) | union appearance (d_u - 17)].
Semantic feature ``s`` = row of a fixed, seeded, unit-norm embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .synthgraph import Box, SceneGraphSample, box_iou

SPATIAL_LAYOUT = ("x1", "y1", "x2", "y2", "cx", "cy", "w", "h", "area")
RELATIVE_LAYOUT = ("dx", "dy", "dx_norm", "dy_norm", "log_w_ratio", "log_h_ratio", "log_area_ratio", "iou")
SPATIAL_DIM = len(SPATIAL_LAYOUT)
RELATIVE_DIM = len(RELATIVE_LAYOUT)


class FeatureError(ValueError):
    pass


@dataclass
class EmbeddingTables:
    """Frozen lookup tables; persisted inside model checkpoints."""

    prototypes: np.ndarray  # C_e x d_app, category appearance centres
    semantic: np.ndarray  # C_e x d_s, unit-norm rows
    union_proj: np.ndarray  # d_app x (d_u - 17)
    appearance_noise: float = 0.3

    @property
    def d_v(self) -> int:
        return self.prototypes.shape[1] + SPATIAL_DIM

    @property
    def d_s(self) -> int:
        return self.semantic.shape[1]

    @property
    def d_u(self) -> int:
        return RELATIVE_DIM + SPATIAL_DIM + self.union_proj.shape[1]

    def to_arrays(self) -> dict:
        return {
            "prototypes": self.prototypes,
            "semantic": self.semantic,
            "union_proj": self.union_proj,
            "appearance_noise": np.array(self.appearance_noise),
        }

    @classmethod
    def from_arrays(cls, arrays: dict) -> "EmbeddingTables":
        return cls(
            prototypes=np.asarray(arrays["prototypes"], dtype=np.float64),
            semantic=np.asarray(arrays["semantic"], dtype=np.float64),
            union_proj=np.asarray(arrays["union_proj"], dtype=np.float64),
            appearance_noise=float(arrays["appearance_noise"]),
        )


def make_tables(
    num_entity_categories: int,
    d_v: int = 64,
    d_s: int = 32,
    d_u: int = 64,
    appearance_noise: float = 0.3,
    seed: int = 0,
) -> EmbeddingTables:
    d_app = d_v - SPATIAL_DIM
    d_union_app = d_u - RELATIVE_DIM - SPATIAL_DIM
    if d_app < 1 or d_union_app < 1:
        raise FeatureError(f"d_v must exceed {SPATIAL_DIM} and d_u must exceed {RELATIVE_DIM + SPATIAL_DIM}")
    rng = np.random.default_rng([seed, 0xFEA7])
    sem = rng.standard_normal((num_entity_categories, d_s))
    sem /= np.linalg.norm(sem, axis=1, keepdims=True)
    return EmbeddingTables(
        prototypes=rng.standard_normal((num_entity_categories, d_app)),
        semantic=sem,
        union_proj=rng.standard_normal((d_app, d_union_app)) / math.sqrt(d_app),
        appearance_noise=appearance_noise,
    )


def _check_box(box: Box) -> None:
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise FeatureError(f"degenerate box {box}")


def spatial_encoding(box: Box) -> np.ndarray:
    """Layout ``SPATIAL_LAYOUT``: corners, centre, width, height, area."""
    _check_box(box)
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    return np.array([x1, y1, x2, y2, (x1 + x2) / 2, (y1 + y2) / 2, w, h, w * h])


def relative_spatial(box_i: Box, box_j: Box) -> np.ndarray:
    """Layout ``RELATIVE_LAYOUT``: offset of j's centre from i's, log size ratios, IoU."""
    _check_box(box_i)
    _check_box(box_j)
    wi, hi = box_i[2] - box_i[0], box_i[3] - box_i[1]
    wj, hj = box_j[2] - box_j[0], box_j[3] - box_j[1]
    dx = (box_j[0] + box_j[2]) / 2 - (box_i[0] + box_i[2]) / 2
    dy = (box_j[1] + box_j[3]) / 2 - (box_i[1] + box_i[3]) / 2
    return np.array(
        [
            dx,
            dy,
            dx / wi,
            dy / hi,
            math.log(wj / wi),
            math.log(hj / hi),
            math.log((wj * hj) / (wi * hi)),
            box_iou(box_i, box_j),
        ]
    )


def union_box(box_i: Box, box_j: Box) -> Box:
    return (min(box_i[0], box_j[0]), min(box_i[1], box_j[1]), max(box_i[2], box_j[2]), max(box_i[3], box_j[3]))


@dataclass
class FeatureBundle:
    entity_features: np.ndarray  # N x d_v
    semantic: np.ndarray  # N x d_s
    union: np.ndarray  # M x d_u
    pair_index: np.ndarray  # M x 2, ordered (i, j), i != j
    labels: np.ndarray  # N ground-truth categories

    @property
    def num_entities(self) -> int:
        return self.entity_features.shape[0]

    @property
    def num_pairs(self) -> int:
        return self.pair_index.shape[0]


def pair_index(n: int) -> np.ndarray:
    return np.array([(i, j) for i in range(n) for j in range(n) if i != j], dtype=np.int64).reshape(-1, 2)


def appearance(category_id: int, appearance_seed: int, tables: EmbeddingTables, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, appearance_seed])
    proto = tables.prototypes[category_id]
    return proto + tables.appearance_noise * rng.standard_normal(proto.shape[0])


def featurize(sample: SceneGraphSample, tables: EmbeddingTables, seed: int = 0) -> FeatureBundle:
    n = len(sample.entities)
    if n < 2:
        raise FeatureError(f"{sample.sample_id}: need at least 2 entities to form pairs")
    app = np.stack([appearance(e.category_id, e.appearance_seed, tables, seed) for e in sample.entities])
    boxes = [e.box for e in sample.entities]
    spatial = np.stack([spatial_encoding(b) for b in boxes])
    labels = np.array([e.category_id for e in sample.entities], dtype=np.int64)
    pairs = pair_index(n)
    union = np.empty((len(pairs), tables.d_u))
    for k, (i, j) in enumerate(pairs):
        union[k] = np.concatenate(
            [
                relative_spatial(boxes[i], boxes[j]),
                spatial_encoding(union_box(boxes[i], boxes[j])),
                ((app[i] + app[j]) / 2) @ tables.union_proj,
            ]
        )
    return FeatureBundle(
        entity_features=np.concatenate([app, spatial], axis=1),
        semantic=tables.semantic[labels],
        union=union,
        pair_index=pairs,
        labels=labels,
    )


def proposal_labels(bundle: FeatureBundle, tables: EmbeddingTables) -> np.ndarray:
    """Nearest-prototype entity labels; the label guess a frozen detector would emit."""
    app = bundle.entity_features[:, : tables.prototypes.shape[1]]
    d = ((app[:, None, :] - tables.prototypes[None]) ** 2).sum(-1)
    return d.argmin(axis=1)

"""Synthetic long-tail scene-graph dataset.

Each relation places a subject/object box pair according to a geometry template
owned by its predicate. Predicates follow a Zipf marginal; the (subject, object)
category pair of a relation is drawn from the predicate's compatibility set
with a secondary Zipf, so tail predicates carry few triplet types.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "val", "test")

Box = tuple[float, float, float, float]


class DatasetError(ValueError):
    """Raised for invalid dataset specs or malformed dataset records."""


@dataclass(frozen=True)
class GeometryTemplate:
    # object center = subject center + (dx * w_s, dy * h_s); object size = subject size * scale
    dx: float
    dy: float
    scale: float


# Tail templates are fine-grained variants of head ones (on_top_of ~ above,
# partly_inside ~ overlaps/inside, beside ~ near) so box noise makes them confusable.
GEOMETRY_TEMPLATES: dict[str, GeometryTemplate] = {
    "near": GeometryTemplate(1.4, 0.0, 1.0),
    "above": GeometryTemplate(0.0, 1.4, 1.0),
    "overlaps": GeometryTemplate(0.5, 0.5, 1.0),
    "inside": GeometryTemplate(0.0, 0.0, 2.2),
    "beside": GeometryTemplate(1.4, 0.35, 0.8),
    "on_top_of": GeometryTemplate(0.0, 1.1, 1.3),
    "partly_inside": GeometryTemplate(0.35, 0.35, 1.7),
    "contains": GeometryTemplate(0.0, 0.0, 0.45),
    "far": GeometryTemplate(3.0, -2.5, 1.0),
    "under_small": GeometryTemplate(-0.2, -1.2, 0.6),
}


def _center_size(box: Box) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    return (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1


def box_iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def measure_geometry(subj: Box, obj: Box) -> tuple[float, float, float, float]:
    """Object offset in subject-size units and per-axis size ratios."""
    sx, sy, sw, sh = _center_size(subj)
    ox, oy, ow, oh = _center_size(obj)
    return (ox - sx) / sw, (oy - sy) / sh, ow / sw, oh / sh


def rule_holds(rule: str, subj: Box, obj: Box, tol: float = 1e-3) -> bool:
    """True when the pair reproduces the template's offset and scale."""
    if rule not in GEOMETRY_TEMPLATES:
        raise DatasetError(f"unknown geometry rule {rule!r}")
    t = GEOMETRY_TEMPLATES[rule]
    dx, dy, rw, rh = measure_geometry(subj, obj)
    return abs(dx - t.dx) < tol and abs(dy - t.dy) < tol and abs(rw - t.scale) < tol and abs(rh - t.scale) < tol


def classify_geometry(subj: Box, obj: Box) -> str:
    """Nearest template in (offset, log-scale) space."""
    dx, dy, rw, rh = measure_geometry(subj, obj)
    ls = 0.5 * math.log(rw * rh)
    return min(
        GEOMETRY_TEMPLATES,
        key=lambda n: (dx - GEOMETRY_TEMPLATES[n].dx) ** 2
        + (dy - GEOMETRY_TEMPLATES[n].dy) ** 2
        + (ls - math.log(GEOMETRY_TEMPLATES[n].scale)) ** 2,
    )


@dataclass(frozen=True)
class EntityInstance:
    category_id: int
    box: Box
    appearance_seed: int


@dataclass(frozen=True)
class RelationAnnotation:
    subject_index: int
    object_index: int
    predicate_id: int


@dataclass(frozen=True)
class SceneGraphSample:
    sample_id: str
    entities: tuple[EntityInstance, ...]
    relations: tuple[RelationAnnotation, ...]


@dataclass
class DatasetSpec:
    num_entity_categories: int = 20
    num_predicate_categories: int = 10
    zipf_exponent: float = 1.5
    triplet_zipf_exponent: float = 1.0
    # predicate_id -> list of (subject_category, object_category)
    triplet_compatibility: dict[int, list[tuple[int, int]]] = field(default_factory=dict)
    samples_per_split: dict[str, int] = field(
        default_factory=lambda: {"train": 1500, "val": 200, "test": 300}
    )
    geometry_rules: dict[int, str] = field(default_factory=dict)
    min_entities: int = 3
    max_entities: int = 6
    max_relations: int = 3
    box_noise: float = 0.2

    def validate(self) -> None:
        if self.num_entity_categories < 1 or self.num_predicate_categories < 1:
            raise DatasetError("category counts must be positive")
        if self.zipf_exponent < 0 or self.triplet_zipf_exponent < 0:
            raise DatasetError("zipf exponents must be non-negative")
        if self.min_entities < 2 or self.max_entities < self.min_entities:
            raise DatasetError("need 2 <= min_entities <= max_entities")
        if self.max_relations < 1 or 2 * self.max_relations > self.max_entities:
            raise DatasetError("max_relations must satisfy 1 <= 2*max_relations <= max_entities")
        for split in SPLITS:
            if self.samples_per_split.get(split, 0) <= 0:
                raise DatasetError(f"split {split!r} needs a positive sample count")
        for p in range(self.num_predicate_categories):
            pairs = self.triplet_compatibility.get(p, [])
            if not pairs:
                raise DatasetError(f"predicate {p} has no compatible (subject, object) pair")
            for s, o in pairs:
                if not (0 <= s < self.num_entity_categories and 0 <= o < self.num_entity_categories):
                    raise DatasetError(f"predicate {p} references unknown category in pair {(s, o)}")
            rule = self.geometry_rules.get(p)
            if rule not in GEOMETRY_TEMPLATES:
                raise DatasetError(f"predicate {p} has unknown geometry rule {rule!r}")

    def to_json(self) -> dict:
        return {
            "num_entity_categories": self.num_entity_categories,
            "num_predicate_categories": self.num_predicate_categories,
            "zipf_exponent": self.zipf_exponent,
            "triplet_zipf_exponent": self.triplet_zipf_exponent,
            "triplet_compatibility": {
                str(p): [list(pair) for pair in pairs]
                for p, pairs in sorted(self.triplet_compatibility.items())
            },
            "samples_per_split": dict(self.samples_per_split),
            "geometry_rules": {str(p): r for p, r in sorted(self.geometry_rules.items())},
            "min_entities": self.min_entities,
            "max_entities": self.max_entities,
            "max_relations": self.max_relations,
            "box_noise": self.box_noise,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSpec":
        doc = dict(doc)
        doc["triplet_compatibility"] = {
            int(p): [tuple(pair) for pair in pairs]
            for p, pairs in doc.get("triplet_compatibility", {}).items()
        }
        doc["geometry_rules"] = {int(p): r for p, r in doc.get("geometry_rules", {}).items()}
        try:
            return cls(**doc)
        except TypeError as exc:
            raise DatasetError(f"bad dataset spec: {exc}") from None


def default_spec(
    num_entity_categories: int = 20,
    num_predicate_categories: int = 10,
    zipf_exponent: float = 1.5,
    samples_per_split: dict[str, int] | None = None,
    seed: int = 0,
    pool_size: int = 12,
    **kwargs,
) -> DatasetSpec:
    """Desk-scale spec.

    Every predicate draws its compatible category pairs from one shared pool, so
    entity labels alone do not identify the predicate; head predicates get more
    pairs than tail ones.
    """
    rng = np.random.default_rng(seed)
    rules = list(GEOMETRY_TEMPLATES)
    n_cells = num_entity_categories**2
    pool = rng.choice(n_cells, size=min(pool_size, n_cells), replace=False)
    compat = {}
    for p in range(num_predicate_categories):
        k = min(max(2, 8 - p), len(pool))
        flat = rng.choice(pool, size=k, replace=False)
        compat[p] = [(int(f // num_entity_categories), int(f % num_entity_categories)) for f in flat]
    spec = DatasetSpec(
        num_entity_categories=num_entity_categories,
        num_predicate_categories=num_predicate_categories,
        zipf_exponent=zipf_exponent,
        triplet_compatibility=compat,
        geometry_rules={p: rules[p % len(rules)] for p in range(num_predicate_categories)},
        **kwargs,
    )
    if samples_per_split is not None:
        spec.samples_per_split = dict(samples_per_split)
    spec.validate()
    return spec


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=float) ** -exponent
    return w / w.sum()


@dataclass
class Dataset:
    spec: DatasetSpec
    splits: dict[str, list[SceneGraphSample]]
    # predicate ids in draw order per split, kept only in memory
    predicate_draws: dict[str, list[int]] = field(default_factory=dict, compare=False)


def _place_pair(rng: np.random.Generator, tmpl: GeometryTemplate) -> tuple[Box, Box]:
    for _ in range(1000):
        w = rng.uniform(0.06, 0.16)
        h = rng.uniform(0.06, 0.16)
        ow, oh = w * tmpl.scale, h * tmpl.scale
        # offsets of object center from subject center
        ox, oy = tmpl.dx * w, tmpl.dy * h
        lo_x = max(w / 2, ow / 2 - ox)
        hi_x = min(1 - w / 2, 1 - ow / 2 - ox)
        lo_y = max(h / 2, oh / 2 - oy)
        hi_y = min(1 - h / 2, 1 - oh / 2 - oy)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        subj = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
        obj = (cx + ox - ow / 2, cy + oy - oh / 2, cx + ox + ow / 2, cy + oy + oh / 2)
        return subj, obj
    raise DatasetError("could not place box pair inside the unit square")


def _perturb(rng: np.random.Generator, box: Box, noise: float) -> Box:
    x1, y1, x2, y2 = box
    if noise > 0:
        w, h = x2 - x1, y2 - y1
        d = rng.normal(0.0, noise, size=4) * np.array([w, h, w, h])
        x1, y1, x2, y2 = x1 + d[0], y1 + d[1], x2 + d[2], y2 + d[3]
        x1, y1 = min(max(x1, 0.0), 0.99), min(max(y1, 0.0), 0.99)
        x2, y2 = min(max(x2, x1 + 0.005), 1.0), min(max(y2, y1 + 0.005), 1.0)
    return _round_box((x1, y1, x2, y2))


def _round_box(box) -> Box:
    return tuple(round(float(c), 6) for c in box)  # type: ignore[return-value]


def _random_box(rng: np.random.Generator) -> Box:
    w, h = rng.uniform(0.05, 0.3, size=2)
    x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return _round_box((x1, y1, x1 + w, y1 + h))


def _generate_split(spec: DatasetSpec, split: str, count: int, rng: np.random.Generator):
    pred_p = zipf_probs(spec.num_predicate_categories, spec.zipf_exponent)
    pair_p = {
        p: zipf_probs(len(pairs), spec.triplet_zipf_exponent)
        for p, pairs in spec.triplet_compatibility.items()
    }
    samples, draws = [], []
    for i in range(count):
        n_rel = int(rng.integers(1, spec.max_relations + 1))
        lo = max(spec.min_entities, 2 * n_rel)
        n_ent = int(rng.integers(lo, spec.max_entities + 1))
        entities: list[EntityInstance] = []
        rel_slots = []
        for _ in range(n_rel):
            p = int(rng.choice(spec.num_predicate_categories, p=pred_p))
            draws.append(p)
            pairs = spec.triplet_compatibility[p]
            s_cat, o_cat = pairs[int(rng.choice(len(pairs), p=pair_p[p]))]
            sb, ob = _place_pair(rng, GEOMETRY_TEMPLATES[spec.geometry_rules[p]])
            sb, ob = _perturb(rng, sb, spec.box_noise), _perturb(rng, ob, spec.box_noise)
            rel_slots.append((len(entities), len(entities) + 1, p))
            entities.append(EntityInstance(int(s_cat), sb, int(rng.integers(0, 2**31 - 1))))
            entities.append(EntityInstance(int(o_cat), ob, int(rng.integers(0, 2**31 - 1))))
        while len(entities) < n_ent:
            entities.append(
                EntityInstance(
                    int(rng.integers(0, spec.num_entity_categories)),
                    _random_box(rng),
                    int(rng.integers(0, 2**31 - 1)),
                )
            )
        perm = rng.permutation(len(entities))
        where = {int(old): new for new, old in enumerate(perm)}
        relations = tuple(RelationAnnotation(where[s], where[o], p) for s, o, p in rel_slots)
        samples.append(
            SceneGraphSample(
                sample_id=f"{split}-{i:05d}",
                entities=tuple(entities[int(j)] for j in perm),
                relations=relations,
            )
        )
    return samples, draws


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    spec.validate()
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    splits, draws = {}, {}
    for split, child in zip(SPLITS, children):
        rng = np.random.default_rng(child)
        splits[split], draws[split] = _generate_split(
            spec, split, spec.samples_per_split[split], rng
        )
    return Dataset(spec=spec, splits=splits, predicate_draws=draws)


# ---------------------------------------------------------------- persistence


def _sample_to_json(sample: SceneGraphSample) -> dict:
    return {
        "sample_id": sample.sample_id,
        "entities": [
            {"category_id": e.category_id, "box": list(e.box), "appearance_seed": e.appearance_seed}
            for e in sample.entities
        ],
        "relations": [[r.subject_index, r.object_index, r.predicate_id] for r in sample.relations],
    }


def _sample_from_json(doc: dict, spec: DatasetSpec, where: str) -> SceneGraphSample:
    try:
        sid = str(doc["sample_id"])
        entities = tuple(
            EntityInstance(int(e["category_id"]), tuple(float(c) for c in e["box"]), int(e["appearance_seed"]))
            for e in doc["entities"]
        )
        relations = tuple(RelationAnnotation(int(s), int(o), int(p)) for s, o, p in doc["relations"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed sample record ({exc})") from None
    sample = SceneGraphSample(sid, entities, relations)
    validate_sample(sample, spec, where=f"{where} ({sid})")
    return sample


def validate_sample(sample: SceneGraphSample, spec: DatasetSpec, where: str = "") -> None:
    where = where or sample.sample_id
    n = len(sample.entities)
    if n < 2:
        raise DatasetError(f"{where}: needs at least 2 entities, got {n}")
    for k, e in enumerate(sample.entities):
        if len(e.box) != 4:
            raise DatasetError(f"{where}: entity {k} box must have 4 coordinates")
        x1, y1, x2, y2 = e.box
        if not (x1 < x2 and y1 < y2):
            raise DatasetError(f"{where}: entity {k} box {e.box} is degenerate")
        if not 0 <= e.category_id < spec.num_entity_categories:
            raise DatasetError(f"{where}: entity {k} category {e.category_id} out of range")
    seen = set()
    for k, r in enumerate(sample.relations):
        if r.subject_index == r.object_index:
            raise DatasetError(f"{where}: relation {k} has subject_index == object_index")
        if not (0 <= r.subject_index < n and 0 <= r.object_index < n):
            raise DatasetError(f"{where}: relation {k} references a missing entity")
        if not 0 <= r.predicate_id < spec.num_predicate_categories:
            raise DatasetError(f"{where}: relation {k} predicate {r.predicate_id} out of range")
        key = (r.subject_index, r.object_index, r.predicate_id)
        if key in seen:
            raise DatasetError(f"{where}: relation {k} duplicates an earlier triple")
        seen.add(key)


def dump_split(spec: DatasetSpec, samples: list[SceneGraphSample]) -> str:
    doc = {"spec": spec.to_json(), "samples": [_sample_to_json(s) for s in samples]}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for split, samples in dataset.splits.items():
        (path / f"{split}.json").write_text(dump_split(dataset.spec, samples))


def load_split(path: str | Path) -> tuple[DatasetSpec, list[SceneGraphSample]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or "spec" not in doc or "samples" not in doc:
        raise DatasetError(f"{path.name}: expected top-level keys 'spec' and 'samples'")
    spec = DatasetSpec.from_json(doc["spec"])
    samples = [
        _sample_from_json(s, spec, where=f"{path.name} record {k}") for k, s in enumerate(doc["samples"])
    ]
    return spec, samples


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    splits = {}
    spec = None
    for split in SPLITS:
        f = path / f"{split}.json"
        if not f.exists():
            continue
        spec, splits[split] = load_split(f)
    if spec is None:
        raise DatasetError(f"{path}: no split files found")
    return Dataset(spec=spec, splits=splits)


# ---------------------------------------------------------------- statistics


@dataclass
class FrequencyTable:
    predicate_counts: dict[int, int]
    triplet_counts: dict[tuple[int, int, int], int]

    @property
    def total(self) -> int:
        return sum(self.predicate_counts.values())


def frequency_table(samples: list[SceneGraphSample], num_predicates: int | None = None) -> FrequencyTable:
    preds: Counter = Counter()
    trips: Counter = Counter()
    for s in samples:
        for r in s.relations:
            preds[r.predicate_id] += 1
            trips[(s.entities[r.subject_index].category_id, r.predicate_id, s.entities[r.object_index].category_id)] += 1
    counts = {p: preds.get(p, 0) for p in range(num_predicates)} if num_predicates else dict(preds)
    return FrequencyTable(predicate_counts=counts, triplet_counts=dict(trips))

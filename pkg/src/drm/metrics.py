"""Scene-graph recall metrics.

Candidates are ranked by ``(score desc, subject, object, predicate)`` so that
equal scores resolve deterministically. Recall is micro-pooled over the whole
split by default; ``mode="per_image"`` averages per-image recalls instead.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("PredCls", "SGCls")


class MetricsError(ValueError):
    pass


@dataclass
class SamplePrediction:
    sample_id: str
    triplets: list[tuple[int, int, int, float]]  # (subject, object, predicate, score)
    entity_labels: list[int]

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "triplets": [[s, o, p, float(sc)] for s, o, p, sc in self.triplets],
            "entity_labels": [int(x) for x in self.entity_labels],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SamplePrediction":
        return cls(
            sample_id=str(doc["sample_id"]),
            triplets=[(int(s), int(o), int(p), float(sc)) for s, o, p, sc in doc["triplets"]],
            entity_labels=[int(x) for x in doc["entity_labels"]],
        )


@dataclass
class GroundTruth:
    sample_id: str
    triplets: list[tuple[int, int, int]]  # (subject, object, predicate)
    entity_labels: list[int]


@dataclass(frozen=True)
class HitRecord:
    sample_id: str
    subject: int
    object: int
    predicate: int
    subject_category: int
    object_category: int
    hit: bool

    @property
    def triplet_type(self) -> tuple[int, int, int]:
        return (self.subject_category, self.predicate, self.object_category)


def rank_candidates(triplets, graph_constraint: bool) -> list[tuple[int, int, int, float]]:
    ordered = sorted(triplets, key=lambda t: (-t[3], t[0], t[1], t[2]))
    if not graph_constraint:
        return ordered
    seen, kept = set(), []
    for t in ordered:
        if (t[0], t[1]) not in seen:
            seen.add((t[0], t[1]))
            kept.append(t)
    return kept


def _check_k(k: int) -> None:
    if k <= 0:
        raise MetricsError(f"K must be positive, got {k}")


def _align(preds: list[SamplePrediction], gts: list[GroundTruth]) -> list[tuple[SamplePrediction, GroundTruth]]:
    by_id = {p.sample_id: p for p in preds}
    out = []
    for g in gts:
        p = by_id.get(g.sample_id)
        if p is None:
            p = SamplePrediction(g.sample_id, [], list(g.entity_labels))
        out.append((p, g))
    return out


def hit_records(
    preds: list[SamplePrediction],
    gts: list[GroundTruth],
    k: int,
    graph_constraint: bool = True,
    require_labels: bool = False,
) -> list[HitRecord]:
    """One record per ground-truth triplet saying whether it appears in the top-K."""
    _check_k(k)
    records = []
    for pred, gt in _align(preds, gts):
        top = {(s, o, p) for s, o, p, _ in rank_candidates(pred.triplets, graph_constraint)[:k]}
        for s, o, p in gt.triplets:
            hit = (s, o, p) in top
            if hit and require_labels:
                hit = pred.entity_labels[s] == gt.entity_labels[s] and pred.entity_labels[o] == gt.entity_labels[o]
            records.append(HitRecord(gt.sample_id, s, o, p, gt.entity_labels[s], gt.entity_labels[o], hit))
    return records


def recall_from_records(records: list[HitRecord], mode: str = "micro") -> float:
    if not records:
        raise MetricsError("no ground-truth triplets to evaluate")
    if mode == "micro":
        return sum(r.hit for r in records) / len(records)
    if mode == "per_image":
        per = defaultdict(list)
        for r in records:
            per[r.sample_id].append(r.hit)
        return float(np.mean([sum(h) / len(h) for h in per.values()]))
    raise MetricsError(f"unknown recall mode {mode!r}")


def recall_at_k(
    preds: list[SamplePrediction],
    gts: list[GroundTruth],
    k: int,
    graph_constraint: bool = True,
    require_labels: bool = False,
    mode: str = "micro",
) -> tuple[float, list[HitRecord]]:
    records = hit_records(preds, gts, k, graph_constraint, require_labels)
    return recall_from_records(records, mode), records


def per_predicate_recall(records: list[HitRecord]) -> dict[int, float]:
    gt, hits = defaultdict(int), defaultdict(int)
    for r in records:
        gt[r.predicate] += 1
        hits[r.predicate] += r.hit
    return {p: hits[p] / gt[p] for p in sorted(gt)}


def mean_recall_at_k(records: list[HitRecord]) -> float:
    """Unweighted mean of per-predicate recall over predicates with ground truth."""
    per = per_predicate_recall(records)
    if not per:
        raise MetricsError("no ground-truth triplets to evaluate")
    return float(np.mean(list(per.values())))


def m_at_k(r: float, mr: float) -> float:
    return (r + mr) / 2


def f_at_k(r: float, mr: float) -> float:
    if r + mr == 0:
        return 0.0
    return 2 * r * mr / (r + mr)


def per_class_report(
    records: list[HitRecord],
    num_predicates: int,
    train_predicate_counts: dict[int, int] | None = None,
    train_triplets: set[tuple[int, int, int]] | None = None,
) -> dict:
    """Per-predicate recall (most frequent first) and per-triplet-type recall."""
    for r in records:
        if not 0 <= r.predicate < num_predicates:
            raise MetricsError(f"unknown predicate id {r.predicate}")
    counts = train_predicate_counts or {}
    per = per_predicate_recall(records)
    order = sorted(per, key=lambda p: (-counts.get(p, 0), p))
    predicates = [{"predicate": p, "train_count": counts.get(p, 0), "recall": per[p]} for p in order]

    gt, hits = defaultdict(int), defaultdict(int)
    for r in records:
        gt[r.triplet_type] += 1
        hits[r.triplet_type] += r.hit
    seen = train_triplets or set()
    triplets = [
        {
            "subject": s,
            "predicate": p,
            "object": o,
            "gt": gt[(s, p, o)],
            "hits": hits[(s, p, o)],
            "recall": hits[(s, p, o)] / gt[(s, p, o)],
            "seen": (s, p, o) in seen,
        }
        for s, p, o in sorted(gt, key=lambda t: (t[1], -gt[t], t))
    ]
    return {"predicates": predicates, "triplets": triplets}


@dataclass
class MetricsReport:
    task: str
    mode: str
    values: dict[str, float] = field(default_factory=dict)  # fractions in [0, 1]
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        """Values scaled by 100; no rounding."""
        return {
            "task": self.task,
            "mode": self.mode,
            "values": {k: 100.0 * v for k, v in self.values.items()},
            "per_class": {
                "predicates": [dict(d, recall=100.0 * d["recall"]) for d in self.per_class.get("predicates", [])],
                "triplets": [dict(d, recall=100.0 * d["recall"]) for d in self.per_class.get("triplets", [])],
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        pc = doc.get("per_class", {})
        return cls(
            task=doc["task"],
            mode=doc["mode"],
            values={k: v / 100.0 for k, v in doc["values"].items()},
            per_class={
                "predicates": [dict(d, recall=d["recall"] / 100.0) for d in pc.get("predicates", [])],
                "triplets": [dict(d, recall=d["recall"] / 100.0) for d in pc.get("triplets", [])],
            },
        )


def evaluate(
    preds: list[SamplePrediction],
    gts: list[GroundTruth],
    task: str,
    num_predicates: int,
    ks: tuple[int, ...] = (50, 100),
    mode: str = "micro",
    train_predicate_counts: dict[int, int] | None = None,
    train_triplets: set[tuple[int, int, int]] | None = None,
) -> MetricsReport:
    if task not in TASKS:
        raise MetricsError(f"unknown task {task!r}")
    require_labels = task == "SGCls"
    values = {}
    class_records = None
    for constrained, prefix in ((True, ""), (False, "ng-")):
        for k in ks:
            r, records = recall_at_k(preds, gts, k, constrained, require_labels, mode)
            mr = mean_recall_at_k(records)
            values[f"{prefix}R@{k}"] = r
            values[f"{prefix}mR@{k}"] = mr
            values[f"{prefix}M@{k}"] = m_at_k(r, mr)
            values[f"{prefix}F@{k}"] = f_at_k(r, mr)
            if constrained and k == max(ks):
                class_records = records
    per_class = per_class_report(class_records, num_predicates, train_predicate_counts, train_triplets)
    return MetricsReport(task=task, mode=mode, values=values, per_class=per_class)


def write_predictions(preds: list[SamplePrediction], path: str | Path) -> None:
    with open(path, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json(), separators=(",", ":")) + "\n")


def read_predictions(path: str | Path) -> list[SamplePrediction]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(SamplePrediction.from_json(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise MetricsError(f"{path}:{lineno}: malformed prediction record ({exc})") from None
    return out

"""Head-to-tail knowledge transfer in predicate (p') and triplet (t') feature space.

Each class is summarised by a Gaussian. Tail covariances are blended with a
distance-weighted mixture of head covariances, synthetic tail features are
drawn from the calibrated Gaussians, heads are under-sampled, and the
relation classifier is fine-tuned on the resulting balanced set.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Hashable

import numpy as np
import torch
import torch.nn.functional as F

from .synthgraph import FrequencyTable

EPS = 1e-6
DKT_MODES = ("none", "P", "T", "PT")

TripletKey = tuple[int, int, int]  # (subject category, predicate, object category)


class DKTError(ValueError):
    pass


@dataclass
class ClassStats:
    key: Hashable
    mu: np.ndarray
    sigma: np.ndarray
    n: int
    degenerate: bool = False  # single sample: sigma fell back to eps * I


@dataclass
class CalibratedStats:
    key: Hashable
    mu: np.ndarray
    sigma: np.ndarray  # calibrated covariance
    alpha: np.ndarray  # weights over ``head_keys``
    head_keys: list
    q: float
    n: int


@dataclass
class HeadTailSplit:
    head_predicates: list[int]
    tail_predicates: list[int]
    head_triplets: list[TripletKey]
    tail_triplets: list[TripletKey]
    triplet_threshold: int


def estimate_class_stats(
    features: np.ndarray, labels, classes=None, eps: float = EPS
) -> dict[Hashable, ClassStats]:
    """Per-class mean and unbiased covariance; single-sample classes get ``eps * I``."""
    features = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    groups: dict[Hashable, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    wanted = list(groups) if classes is None else list(classes)
    d = features.shape[1]
    out = {}
    for key in wanted:
        idx = groups.get(key)
        if not idx:
            raise DKTError(f"class {key!r} has no samples")
        x = features[idx]
        mu = x.mean(axis=0)
        if len(idx) < 2:
            out[key] = ClassStats(key, mu, eps * np.eye(d), 1, degenerate=True)
            continue
        c = x - mu
        sigma = c.T @ c / (len(idx) - 1)
        out[key] = ClassStats(key, mu, (sigma + sigma.T) / 2, len(idx))
    return out


def split_head_tail(freq: FrequencyTable, threshold: int, num_predicates: int | None = None) -> HeadTailSplit:
    """First ceil(C/2) predicates by descending count (ties: lower id first) are head."""
    preds = list(range(num_predicates)) if num_predicates else sorted(freq.predicate_counts)
    order = sorted(preds, key=lambda p: (-freq.predicate_counts.get(p, 0), p))
    n_head = math.ceil(len(order) / 2)
    head, tail = order[:n_head], order[n_head:]
    head_set, tail_set = set(head), set(tail)
    head_trip = sorted(k for k, c in freq.triplet_counts.items() if k[1] in head_set and c > threshold)
    tail_trip = sorted(k for k in freq.triplet_counts if k[1] in tail_set)
    return HeadTailSplit(head, tail, head_trip, tail_trip, threshold)


def transfer_weights(mu_i: np.ndarray, head_means: np.ndarray) -> np.ndarray:
    """Softmax of negative Euclidean distance: closer head classes weigh more."""
    head_means = np.atleast_2d(np.asarray(head_means, dtype=np.float64))
    if head_means.shape[0] == 0:
        raise DKTError("no head classes to transfer from")
    d = np.linalg.norm(head_means - np.asarray(mu_i, dtype=np.float64), axis=1)
    z = -d - (-d).max()
    w = np.exp(z)
    return w / w.sum()


def calibrate_covariance(sigma_i, head_sigmas, alpha, n_i: float, q_i: float) -> np.ndarray:
    """(n/Q) * sigma_i + (1 - n/Q) * sum_j alpha_j * sigma_j."""
    sigma_i = np.asarray(sigma_i, dtype=np.float64)
    if n_i <= 0:
        raise DKTError("class count must be positive")
    if n_i >= q_i:
        if n_i > q_i:
            warnings.warn(f"class has {n_i} samples, above target {q_i}; covariance left unchanged")
        return sigma_i.copy()
    head_sigmas = np.asarray(head_sigmas, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    r = n_i / q_i
    mixed = np.tensordot(alpha, head_sigmas, axes=1)
    out = r * sigma_i + (1.0 - r) * mixed
    return (out + out.T) / 2


def sample_synthetic(mu, sigma, n: int, seed, eps: float = EPS) -> np.ndarray:
    """n draws of mu + L z with L the Cholesky factor of sigma + eps I."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    d = mu.shape[0]
    try:
        chol = np.linalg.cholesky(sigma + eps * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise DKTError(f"covariance is not positive definite after jitter: {exc}") from None
    z = np.random.default_rng(seed).standard_normal((n, d))
    return mu + z @ chol.T


def calibrate_classes(
    stats: dict[Hashable, ClassStats],
    head_keys: list,
    tail_targets: dict[Hashable, float],
) -> dict[Hashable, CalibratedStats]:
    """Calibrate every tail class in ``tail_targets`` (key -> Q) from ``head_keys``."""
    if not head_keys:
        raise DKTError("no head classes to transfer from")
    head_mu = np.stack([stats[k].mu for k in head_keys])
    head_sigma = np.stack([stats[k].sigma for k in head_keys])
    out = {}
    for key, q in tail_targets.items():
        s = stats[key]
        alpha = transfer_weights(s.mu, head_mu)
        sigma = calibrate_covariance(s.sigma, head_sigma, alpha, s.n, q)
        out[key] = CalibratedStats(key, s.mu, sigma, alpha, list(head_keys), q, s.n)
    return out


def uncalibrated(stats: dict[Hashable, ClassStats], keys, targets: dict[Hashable, float]) -> dict:
    """Tail classes keep their own covariance (used when a granularity's transfer is switched off)."""
    return {
        k: CalibratedStats(k, stats[k].mu, stats[k].sigma, np.zeros(0), [], targets[k], stats[k].n) for k in keys
    }


# ---------------------------------------------------------------- balanced set


@dataclass
class BalancedSet:
    p_prime: np.ndarray
    t_prime: np.ndarray
    labels: np.ndarray
    synthetic: np.ndarray  # bool

    def counts(self, num_predicates: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_predicates)


@dataclass
class DKTPlan:
    """Everything needed to synthesise tail samples."""

    split: HeadTailSplit
    q: int
    predicate: dict[int, CalibratedStats]
    triplet: dict[TripletKey, CalibratedStats]
    predicate_stats: dict[int, ClassStats] = field(repr=False, default_factory=dict)
    triplet_stats: dict[TripletKey, ClassStats] = field(repr=False, default_factory=dict)


def _allocate(total: int, weights: list[int]) -> list[int]:
    """Split ``total`` proportionally to ``weights`` (largest remainder, ties to earlier)."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = sorted(range(len(w)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base.tolist()


def plan_transfer(
    real: dict[str, np.ndarray],
    freq: FrequencyTable,
    num_predicates: int,
    threshold: int,
    mode: str = "PT",
    q_override: int | None = None,
    eps: float = EPS,
) -> DKTPlan:
    """Estimate class Gaussians from real features and calibrate the tail ones.

    ``real`` carries ``p_prime``, ``t_prime``, ``predicate`` and ``triplet``
    (triplet keys as (s, p, o) tuples) for every annotated training relation.
    """
    if mode not in DKT_MODES or mode == "none":
        raise DKTError(f"unsupported transfer mode {mode!r}")
    split = split_head_tail(freq, threshold, num_predicates)
    pred_labels = [int(x) for x in real["predicate"]]
    trip_labels = [tuple(int(v) for v in x) for x in real["triplet"]]
    present = set(pred_labels)
    head_present = [p for p in split.head_predicates if p in present]
    if not head_present:
        raise DKTError("no head predicate has features")
    q = q_override if q_override is not None else min(freq.predicate_counts[p] for p in head_present)
    if q <= 0:
        raise DKTError(f"target count Q must be positive, got {q}")

    pstats = estimate_class_stats(real["p_prime"], pred_labels, eps=eps)
    tstats = estimate_class_stats(real["t_prime"], trip_labels, eps=eps)

    tail_preds = [p for p in split.tail_predicates if p in present]
    p_targets = {p: float(q) for p in tail_preds}
    # a tail triplet's target is its share of the predicate's target Q
    t_targets = {}
    for k in split.tail_triplets:
        if k in tstats:
            t_targets[k] = q * tstats[k].n / pstats[k[1]].n
    head_trips = [k for k in split.head_triplets if k in tstats]

    if mode in ("P", "PT"):
        pcal = calibrate_classes(pstats, head_present, p_targets)
    else:
        pcal = uncalibrated(pstats, tail_preds, p_targets)
    if mode in ("T", "PT") and head_trips:
        tcal = calibrate_classes(tstats, head_trips, t_targets)
    else:
        if mode in ("T", "PT"):
            warnings.warn("no head triplet exceeds the threshold; triplet covariances left uncalibrated")
        tcal = uncalibrated(tstats, list(t_targets), t_targets)
    return DKTPlan(split, int(q), pcal, tcal, pstats, tstats)


def build_balanced_set(real: dict[str, np.ndarray], plan: DKTPlan, seed: int, eps: float = EPS) -> BalancedSet:
    """Under-sample heads to Q real records; top tails up to Q with synthetic (p', t') pairs."""
    q = plan.q
    if q <= 0:
        raise DKTError(f"target count Q must be positive, got {q}")
    labels = np.asarray(real["predicate"], dtype=np.int64)
    ss = np.random.default_rng(seed)
    p_out, t_out, y_out, syn_out = [], [], [], []

    for p in plan.split.head_predicates:
        idx = np.flatnonzero(labels == p)
        if len(idx) == 0:
            continue
        keep = np.sort(ss.choice(idx, size=min(q, len(idx)), replace=False))
        p_out.append(real["p_prime"][keep])
        t_out.append(real["t_prime"][keep])
        y_out.append(np.full(len(keep), p))
        syn_out.append(np.zeros(len(keep), dtype=bool))

    for p in plan.split.tail_predicates:
        idx = np.flatnonzero(labels == p)
        if len(idx) == 0:
            continue
        if len(idx) > q:
            idx = np.sort(ss.choice(idx, size=q, replace=False))
        p_out.append(real["p_prime"][idx])
        t_out.append(real["t_prime"][idx])
        y_out.append(np.full(len(idx), p))
        syn_out.append(np.zeros(len(idx), dtype=bool))
        need = q - len(idx)
        if need <= 0:
            continue
        cal = plan.predicate[p]
        p_syn = sample_synthetic(cal.mu, cal.sigma, need, ss.integers(2**63), eps)
        kinds = sorted(k for k in plan.triplet if k[1] == p)
        counts = _allocate(need, [plan.triplet_stats[k].n for k in kinds])
        t_syn = np.concatenate(
            [
                sample_synthetic(plan.triplet[k].mu, plan.triplet[k].sigma, c, ss.integers(2**63), eps)
                for k, c in zip(kinds, counts)
                if c > 0
            ]
        )
        p_out.append(p_syn)
        t_out.append(t_syn)
        y_out.append(np.full(need, p))
        syn_out.append(np.ones(need, dtype=bool))

    return BalancedSet(
        p_prime=np.concatenate(p_out),
        t_prime=np.concatenate(t_out),
        labels=np.concatenate(y_out),
        synthetic=np.concatenate(syn_out),
    )


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64

    def to_json(self) -> dict:
        return asdict(self)


def finetune_classifier(model, balanced: BalancedSet, cfg: FinetuneConfig, seed: int) -> list[dict]:
    """Train only the relation classifier; every other module must stay bit-identical."""
    from .training import frozen_hashes

    before = frozen_hashes(model)
    for p in model.parameters():
        p.requires_grad_(False)
    head = model.relation_classifier
    for p in head.parameters():
        p.requires_grad_(True)
    opt = torch.optim.SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    dtype = next(head.parameters()).dtype
    xp = torch.as_tensor(balanced.p_prime, dtype=dtype)
    xt = torch.as_tensor(balanced.t_prime, dtype=dtype)
    y = torch.as_tensor(balanced.labels, dtype=torch.long)
    rng = np.random.default_rng(seed)
    records = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            loss = F.cross_entropy(head(xp[idx], xt[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        records.append({"epoch": epoch, "L_r": total / max(batches, 1)})
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    after = frozen_hashes(model)
    changed = [k for k in before if before[k] != after[k]]
    assert not changed, f"frozen modules changed during fine-tuning: {changed}"
    return records


# ---------------------------------------------------------------- persistence


def stats_key(kind: str, key) -> str:
    if kind == "predicate":
        return f"predicate:{int(key)}"
    return "triplet:" + "-".join(str(int(v)) for v in key)


def dump_stats(plan: DKTPlan, path: str | Path) -> None:
    """JSON mapping class key -> {mu, sigma (row-major), n}; tail classes add calibration fields."""
    doc = {"q": plan.q, "split": {
        "head_predicates": plan.split.head_predicates,
        "tail_predicates": plan.split.tail_predicates,
        "head_triplets": [list(k) for k in plan.split.head_triplets],
        "tail_triplets": [list(k) for k in plan.split.tail_triplets],
        "triplet_threshold": plan.split.triplet_threshold,
    }, "classes": {}}
    for kind, stats, cal in (("predicate", plan.predicate_stats, plan.predicate),
                             ("triplet", plan.triplet_stats, plan.triplet)):
        for key in sorted(stats):
            s = stats[key]
            entry = {"mu": s.mu.tolist(), "sigma": s.sigma.ravel().tolist(), "n": s.n}
            if key in cal:
                c = cal[key]
                entry["sigma_calibrated"] = c.sigma.ravel().tolist()
                entry["alpha"] = c.alpha.tolist()
                entry["q"] = c.q
            doc["classes"][stats_key(kind, key)] = entry
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_stats(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    out = {}
    for key, entry in doc["classes"].items():
        mu = np.asarray(entry["mu"])
        d = mu.shape[0]
        out[key] = {
            "mu": mu,
            "sigma": np.asarray(entry["sigma"]).reshape(d, d),
            "n": int(entry["n"]),
            **({"sigma_calibrated": np.asarray(entry["sigma_calibrated"]).reshape(d, d)}
               if "sigma_calibrated" in entry else {}),
        }
    return out

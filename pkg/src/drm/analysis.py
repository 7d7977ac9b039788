"""Cosine cluster statistics over projected relation representations."""

from __future__ import annotations

import numpy as np


def pair_similarities(reps: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of every unordered pair, split into (same label, different label)."""
    x = np.asarray(reps, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    keys = [tuple(np.ravel(v).tolist()) for v in labels]
    ids = {k: i for i, k in enumerate(dict.fromkeys(keys))}
    lab = np.asarray([ids[k] for k in keys], dtype=np.int64)
    iu = np.triu_indices(len(x), 1)
    sim = (x @ x.T)[iu]
    same = (lab[:, None] == lab[None, :])[iu]
    return sim[same], sim[~same]


def cluster_margin(reps: np.ndarray, labels) -> dict[str, float]:
    """Mean intra-class minus mean inter-class cosine similarity."""
    intra, inter = pair_similarities(reps, labels)
    if len(intra) == 0 or len(inter) == 0:
        raise ValueError("need at least one same-class and one cross-class pair")
    a, b = float(intra.mean()), float(inter.mean())
    return {"intra": a, "inter": b, "margin": a - b, "pairs_intra": int(len(intra)), "pairs_inter": int(len(inter))}

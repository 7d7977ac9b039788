"""Figures for a finished run: per-predicate recall bars and cosine-similarity histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import pair_similarities  # noqa: E402
from .pipeline import RunResult  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "drm",  # stable element ids
}


class PlotError(ValueError):
    pass


def predicate_recall_chart(result: RunResult, path: Path) -> None:
    stages = list(result.reports)
    per = {st: result.reports[st].per_class.get("predicates", []) for st in stages}
    if not any(per.values()):
        raise PlotError(f"{result.run_id}: no per-predicate data")
    # most frequent predicate first; first stage fixes the order
    order = [d["predicate"] for d in per[stages[0]]]
    width = 0.8 / len(stages)
    x = np.arange(len(order))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.45 * len(order) + 1.5), 2.6))
        for i, st in enumerate(stages):
            rec = {d["predicate"]: 100.0 * d["recall"] for d in per[st]}
            ax.bar(x + (i - (len(stages) - 1) / 2) * width, [rec.get(p, 0.0) for p in order], width, label=st)
        ax.set_xticks(x, [str(p) for p in order])
        ax.set_xlabel("predicate (by training frequency)")
        ax.set_ylabel("R@100 (%)")
        ax.set_ylim(0, 105)
        if len(stages) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)


def similarity_histogram(result: RunResult, path: Path) -> dict:
    feats_path = Path(result.run_dir) / "features_test.npz"
    if not feats_path.exists():
        raise PlotError(f"{result.run_id}: no stored test features")
    f = np.load(feats_path)
    means = {}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.4))
        for ax, (name, rep, lab) in zip(axes, (("p''", "p_proj", "predicate"), ("t''", "t_proj", "triplet"))):
            intra, inter = pair_similarities(f[rep], f[lab])
            bins = np.linspace(-1, 1, 41)
            ax.hist(inter, bins=bins, density=True, alpha=0.6, label="inter-class")
            ax.hist(intra, bins=bins, density=True, alpha=0.6, label="intra-class")
            ax.set_title(name)
            ax.set_xlabel("cosine similarity")
            means[name] = {
                "intra": float(intra.mean()) if len(intra) else float("nan"),
                "inter": float(inter.mean()) if len(inter) else float("nan"),
            }
        axes[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
    return means


def emit_plots(result: RunResult, out_dir: str | Path | None = None) -> dict[str, str]:
    """Write ``{run_id}_predrecall.svg`` and ``{run_id}_similarity.svg``; returns name -> path."""
    out = Path(out_dir) if out_dir else Path(result.run_dir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "predrecall": out / f"{result.run_id}_predrecall.svg",
        "similarity": out / f"{result.run_id}_similarity.svg",
    }
    predicate_recall_chart(result, paths["predrecall"])
    similarity_histogram(result, paths["similarity"])
    return {k: str(v) for k, v in paths.items()}

"""Report figures: fpr sweep and cumulative insertions per hour."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# strip the version stamp so identical data gives identical bytes
_PNG_META = {"Software": None}
_STYLE = {"d3a": ("tab:blue", "o"), "naive": ("tab:red", "s"), "nonspatial": ("tab:green", "^")}


def _style(engine: str):
    return _STYLE.get(engine, ("tab:gray", "x"))


def plot_sweep(rows: Sequence, path) -> Path:
    """MRR@50 and miss rate against detector fpr, one line per engine."""
    path = Path(path)
    engines = sorted({r.engine for r in rows})
    fig, (ax_mrr, ax_miss) = plt.subplots(1, 2, figsize=(9, 3.6))
    for eng in engines:
        pts = sorted((r.fpr, r.mrr, r.miss_rate) for r in rows if r.engine == eng)
        color, marker = _style(eng)
        ax_mrr.plot([p[0] for p in pts], [p[1] for p in pts], color=color, marker=marker, label=eng)
        ax_miss.plot([p[0] for p in pts], [p[2] for p in pts], color=color, marker=marker, label=eng)
    ax_mrr.set(xlabel="false positive rate", ylabel="MRR@50", ylim=(-0.02, 1.02))
    ax_miss.set(xlabel="false positive rate", ylabel="miss rate", ylim=(-0.02, 1.02))
    ax_mrr.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_insertions(series: Mapping[str, Sequence[int]], path) -> Path:
    """Cumulative OIc + STc insertions at the end of each hour."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for eng in sorted(series):
        ys = list(series[eng])
        color, marker = _style(eng)
        ax.plot(range(1, len(ys) + 1), ys, color=color, marker=marker, label=eng)
    ax.set(xlabel="hour", ylabel="cumulative insertions")
    ax.set_yscale("symlog")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path

"""Quality-diversity figures rendered next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import SweepPoint  # noqa: E402


def _annotate(ax, xs, ys, temps) -> None:
    for x, y, t in zip(xs, ys, temps):
        ax.annotate(f"{t:g}", (x, y), textcoords="offset points", xytext=(3, 3), fontsize=7)


def plot_sweep(points: Sequence[SweepPoint], path: str | Path, title: str = "temperature sweep") -> Path:
    """BLEU against 1 - Self-BLEU; the top right corner is better on both axes."""
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = [p.bleu for p in points]
    ys = [1.0 - p.self_bleu for p in points]
    ax.plot(xs, ys, marker="o")
    _annotate(ax, xs, ys, [p.temperature for p in points])
    ax.set_xlabel("BLEU-4 (quality)")
    ax.set_ylabel("1 - Self-BLEU-4 (diversity)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_compare(rows: Sequence[Sequence], path: str | Path, labels: tuple[str, str] = ("a", "b")) -> Path:
    """Overlay two quality-diversity curves from ``compare_runs`` rows."""
    temps = [float(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    for (bleu_col, div_col), label in zip(((1, 2), (4, 5)), labels):
        xs = [float(r[bleu_col]) for r in rows]
        ys = [float(r[div_col]) for r in rows]
        ax.plot(xs, ys, marker="o", label=label)
        _annotate(ax, xs, ys, temps)
    ax.set_xlabel("BLEU-4 (quality)")
    ax.set_ylabel("Distinct-2 (diversity)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

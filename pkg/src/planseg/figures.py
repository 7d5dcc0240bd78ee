"""Matplotlib rendering of evaluation reports and scaling-study results.

Every CLI path that emits delimited output also renders a PNG next to it;
plots use the Agg backend so headless runs work.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import EvalReport


def render_eval_figure(report: EvalReport, out_path: Path) -> Path:
    """Two panels: per-case Dice distribution and the two aggregation means."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    defined = [c.dice for c in report.cases if c.dice is not None]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))

    if defined:
        ax0.hist(defined, bins=min(20, max(5, len(defined) // 2)), color="#4878d0", edgecolor="black")
    ax0.set_xlabel("case Dice")
    ax0.set_ylabel("cases")
    ax0.set_title(f"per-case Dice (n={len(report.cases)}, defined={len(defined)})")
    ax0.set_xlim(0, 1)

    labels = ["challenge", "nnU-Net"]
    values = [
        report.mean_dice_challenge,
        report.mean_dice_nnunet if report.mean_dice_nnunet is not None else 0.0,
    ]
    bars = ax1.bar(labels, values, color=["#4878d0", "#ee854a"])
    if report.mean_dice_nnunet is None:
        bars[1].set_hatch("//")
        ax1.text(1, 0.02, "undefined", ha="center")
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("mean Dice")
    ax1.set_title("aggregation conventions")
    for bar, v in zip(bars, values):
        ax1.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}", ha="center", fontsize=9)

    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_scaling_figure(rows: list[dict], out_path: Path) -> Path:
    """Dice vs batch size, one series per (encoder, patch) pair.

    Rows need keys: encoder, batch, patch, seed, dice_challenge. Seeds are
    averaged per point; individual seeds are scattered behind the lines.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    series = defaultdict(list)
    for r in rows:
        if r.get("dice_challenge") is None:
            continue
        key = (r["encoder"], tuple(r["patch"]) if isinstance(r["patch"], list) else r["patch"])
        series[key].append((r["batch"], float(r["dice_challenge"])))

    fig, ax = plt.subplots(figsize=(7, 5))
    markers = ["o", "s", "^", "D", "v", "P"]
    for i, (key, points) in enumerate(sorted(series.items(), key=str)):
        encoder, patch = key
        by_batch = defaultdict(list)
        for batch, v in points:
            by_batch[batch].append(v)
        xs = sorted(by_batch)
        means = [sum(by_batch[x]) / len(by_batch[x]) for x in xs]
        label = f"{encoder}, patch {patch}"
        ax.plot(xs, means, marker=markers[i % len(markers)], label=label)
        for x in xs:
            ax.scatter([x] * len(by_batch[x]), by_batch[x], alpha=0.3, s=12,
                       color=ax.lines[-1].get_color())

    ax.set_xlabel("batch size")
    ax.set_ylabel("pooled CV Dice (challenge convention)")
    ax.set_title("scaling study")
    ax.set_xscale("log", base=2)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path

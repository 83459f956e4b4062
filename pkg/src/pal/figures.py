"""Matplotlib renderings written next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .trainer import smoothed  # noqa: E402

_STAGE_COLORS = {1: "tab:blue", 2: "tab:orange", 3: "tab:green"}


def plot_loss_curve(metric_rows, path, title: str = "training loss") -> None:
    """metric_rows: iterable of (step, stage, lr, loss) in emission order."""
    rows = list(metric_rows)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    offset = 0
    for stage in (1, 2, 3):
        stage_rows = [r for r in rows if r[1] == stage]
        if not stage_rows:
            continue
        xs = [offset + r[0] for r in stage_rows]
        losses = [r[3] for r in stage_rows]
        ax.plot(xs, losses, color=_STAGE_COLORS[stage], alpha=0.25, lw=0.6)
        ax.plot(xs, smoothed(losses), color=_STAGE_COLORS[stage], lw=1.4,
                label=f"stage {stage}")
        offset = xs[-1] + 1
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("masked next-token loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_stage_accuracy(report_rows, path,
                        title: str = "held-out accuracy by stage") -> None:
    """report_rows: dicts with keys config, stage, accuracy (mean over tasks)."""
    configs = sorted({r["config"] for r in report_rows})
    stages = sorted({r["stage"] for r in report_rows})
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(configs), 1)
    for i, cfg in enumerate(configs):
        xs = [s + i * width for s in range(len(stages))]
        ys = [next(r["accuracy"] for r in report_rows
                   if r["config"] == cfg and r["stage"] == s) for s in stages]
        ax.bar(xs, ys, width=width, label=cfg)
    ax.set_xticks([s + 0.4 - width / 2 for s in range(len(stages))])
    ax.set_xticklabels([f"stage {s}" for s in stages])
    ax.set_ylim(0, 1.0)
    ax.set_ylabel("exact-match accuracy")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

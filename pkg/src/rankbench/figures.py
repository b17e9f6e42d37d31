"""Figure rendering for reports: metric bars, grid heatmaps, fertility.

All figures render through the Agg backend straight to files, so the
report path works on headless machines.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport

plt.rcParams.update(
    {
        "figure.dpi": 110,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.axisbelow": True,
    }
)


def save_metric_bars(
    path: str | Path, report: EvalReport, title: str = ""
) -> None:
    """One bar per metric@cutoff mean."""
    keys = sorted(report.results)
    values = [report.results[key].mean for key in keys]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(keys)), 3.2))
    ax.bar(range(len(keys)), values, color="#4878a8")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=45, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("mean")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_fertility_bars(
    path: str | Path, fertilities: dict[str, float], title: str = ""
) -> None:
    """One bar per vocabulary's tokens-per-word average."""
    names = list(fertilities)
    values = [fertilities[name] for name in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(names)), 3.2))
    ax.bar(range(len(names)), values, color="#a85448")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("subword fertility")
    ax.axhline(1.0, color="black", linewidth=0.8, linestyle="--")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_grid_heatmaps(
    prefix: str | Path,
    cells: list[dict],
    lrs: list[float],
    batch_sizes: list[int],
    epoch_values: list[int],
    metrics: tuple[str, ...] = ("mrr@10", "ndcg@10", "recall@10"),
) -> list[Path]:
    """One heatmap per (metric, epoch setting): lr rows x batch columns.

    Failed cells render as blanks. Returns the written paths.
    """
    prefix = Path(prefix)
    by_key = {
        (cell["lr"], cell["batch_size"], cell["epochs"]): cell
        for cell in cells
    }
    written: list[Path] = []
    for metric in metrics:
        for epochs in epoch_values:
            values = np.full((len(lrs), len(batch_sizes)), np.nan)
            for i, lr in enumerate(lrs):
                for j, batch_size in enumerate(batch_sizes):
                    cell = by_key.get((lr, batch_size, epochs))
                    if cell is not None and cell.get("error") is None:
                        values[i, j] = cell[metric]
            fig, ax = plt.subplots(figsize=(3.6, 3.2))
            image = ax.imshow(
                values, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto"
            )
            ax.set_xticks(range(len(batch_sizes)))
            ax.set_xticklabels(batch_sizes)
            ax.set_yticks(range(len(lrs)))
            ax.set_yticklabels([f"{lr:g}" for lr in lrs])
            ax.set_xlabel("batch size")
            ax.set_ylabel("learning rate")
            ax.set_title(f"{metric}, {epochs} epochs")
            ax.grid(False)
            for i in range(len(lrs)):
                for j in range(len(batch_sizes)):
                    if np.isfinite(values[i, j]):
                        ax.text(
                            j,
                            i,
                            f"{values[i, j]:.3f}",
                            ha="center",
                            va="center",
                            color="white",
                            fontsize=9,
                        )
            fig.colorbar(image, ax=ax, fraction=0.046)
            fig.tight_layout()
            out = prefix.with_name(
                f"{prefix.name}.{metric.replace('@', '_at_')}.{epochs}ep.png"
            )
            fig.savefig(out)
            plt.close(fig)
            written.append(out)
    return written

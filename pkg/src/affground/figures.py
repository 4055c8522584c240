"""Figure rendering for reports: loss curves next to their CSVs and
per-sample metric distributions next to the JSON/CSV report."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 9,
})


def plot_loss_curves(curves: dict[str, list[dict]], out_path: Path) -> Path:
    """One panel of mean loss per epoch, one line per stage."""
    fig, ax = plt.subplots()
    for label, rows in sorted(curves.items()):
        if not rows:
            continue
        ax.plot([r["epoch"] for r in rows], [r["mean_loss"] for r in rows],
                marker="o", markersize=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_metric_report(report, out_path: Path) -> Path:
    """Histograms of per-sample kld / sim / nss with their means."""
    fig, axes = plt.subplots(1, 3, figsize=(10.5, 3.4))
    for ax, key in zip(axes, ("kld", "sim", "nss")):
        values = [row[key] for row in report.per_sample]
        if values:
            ax.hist(values, bins=min(20, max(5, len(values) // 2)), alpha=0.8)
            ax.axvline(getattr(report, key), color="k", linestyle="--", linewidth=1)
        ax.set_title(f"{key} (mean {getattr(report, key):.3f})")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)

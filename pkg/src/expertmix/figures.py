"""Matplotlib figure rendering for the report command.

Figures are written straight to files (Agg backend); nothing opens a window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .costs import OverheadReport
from .sweep import SweepRow


def sweep_figure(rows: list[SweepRow], path) -> None:
    """Overhead/accuracy tradeoff across pooled feature-map sizes."""
    rows = sorted(rows, key=lambda r: -r.n)
    labels = [r.feature_map_label() for r in rows]
    xs = range(len(rows))
    fig, ax1 = plt.subplots(figsize=(6.4, 4.0))
    ax1.plot(xs, [r.weight_overhead_pct for r in rows], "o-", color="tab:red", label="network size overhead")
    ax1.set_ylabel("overhead vs GE (%)", color="tab:red")
    ax1.set_xticks(list(xs), labels, rotation=30)
    ax1.set_xlabel("pooled feature map in LE/GN")

    if any(r.customized_accuracy is not None for r in rows):
        ax2 = ax1.twinx()
        ax2.plot(xs, [r.customized_accuracy for r in rows], "s-", color="tab:blue", label="customized accuracy")
        ax2.plot(xs, [r.generic_accuracy for r in rows], "^-", color="tab:green", label="generic accuracy")
        ax2.set_ylabel("overall accuracy (%)")
        ax2.legend(loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


METRIC_KEYS = [
    ("ge_customized", "GE"),
    ("le_customized", "LE"),
    ("gn_customized", "GN"),
    ("overall_customized", "overall"),
    ("le_given_ge_wrong", "LE | GE wrong"),
    ("overall_generic", "overall generic"),
]


def metrics_figure(records: list[dict], path) -> None:
    """Grouped per-user bars of the component accuracy record."""
    fig, ax = plt.subplots(figsize=(7.2, 4.0))
    width = 0.8 / max(len(METRIC_KEYS), 1)
    for j, (key, label) in enumerate(METRIC_KEYS):
        xs = [i + j * width for i in range(len(records))]
        ys = [100.0 * (rec[key] or 0.0) for rec in records]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks(
        [i + 0.4 for i in range(len(records))],
        [f"user {rec.get('user_id', i + 1)}" for i, rec in enumerate(records)],
    )
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def overhead_figure(report: OverheadReport, path) -> None:
    """Bar chart of the added cost of LE+GN relative to GE."""
    names = ["weights", "MAC", "SRAM", "DRAM", "total energy"]
    values = [report.weight_pct, report.mac_pct, report.sram_pct, report.dram_pct, report.energy_pct]
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    ax.bar(names, values, color="tab:purple")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.2f}%", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("overhead vs GE (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(report_dict: dict, path) -> None:
    """Loss and accuracy curves from a training report."""
    epochs = report_dict["epochs"]
    xs = range(1, len(epochs) + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
    ax1.plot(xs, [e["train_loss"] for e in epochs], label="train")
    ax1.plot(xs, [e["val_loss"] for e in epochs], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(xs, [100.0 * e["train_accuracy"] for e in epochs], label="train")
    ax2.plot(xs, [100.0 * e["val_accuracy"] for e in epochs], label="validation")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy (%)")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Report figures rendered to files alongside the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def render_training_curves(rows: list[dict], path) -> None:
    """Two-panel loss/accuracy curves from parsed metrics rows."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r["train_loss"] for r in rows], label="train loss")
    ax_loss.plot(epochs, [r["ce_part"] for r in rows], label="cross-entropy part", ls="--")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [r["train_acc"] for r in rows], label="train acc")
    ax_acc.plot(epochs, [r["val_acc"] for r in rows], label="val acc")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_census_curves(rows: list[dict], path) -> None:
    """Per-threshold counts of confidently-correct training samples by epoch."""
    census_cols = [c for c in (rows[0].keys() if rows else []) if c.startswith("census_")]
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in census_cols:
        ax.plot(epochs, [r[col] for r in rows], label=f"p > {col[len('census_'):]}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("confidently correct samples")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)


def render_sweep(rows, path, axis_label: str, baseline: float | None = None) -> None:
    """Mean accuracy with seed spread against the swept parameter."""
    values = [r.value for r in rows]
    means = [r.mean_val_acc for r in rows]
    stds = [r.std_val_acc for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(values, means, yerr=stds, marker="o", capsize=3)
    if baseline is not None:
        ax.axhline(baseline, ls="--", color="tab:blue", label="baseline")
        ax.legend()
    ax.set_xlabel(axis_label)
    ax.set_ylabel("mean val accuracy")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)

"""Figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_loss_curves(histories: dict, path, title: str = "loss") -> None:
    """``histories`` maps a run label to a list of epoch logs."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, history in histories.items():
        epochs = [e.epoch for e in history]
        ax.plot(epochs, [e.train_loss for e in history], label=f"{label} train")
        valid = [e.valid_loss for e in history]
        if any(v is not None for v in valid):
            ax.plot(epochs, valid, linestyle="--", label=f"{label} valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_column_shapes(columns: list[dict], path, limit: int = 40) -> None:
    """Horizontal bars of per-column phi, worst columns first."""
    rows = sorted(columns, key=lambda c: c["phi"])[:limit]
    fig, ax = plt.subplots(figsize=(6, 0.25 * len(rows) + 1.2))
    names = [r["column"] for r in rows]
    ax.barh(range(len(rows)), [r["phi"] for r in rows], color="tab:blue")
    ax.set_yticks(range(len(rows)), names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("column shape similarity")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_length_histograms(real: dict, synth: dict, path, title: str = "array length") -> None:
    lengths = sorted(set(real) | set(synth))
    n_r, n_s = max(sum(real.values()), 1), max(sum(synth.values()), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = range(len(lengths))
    ax.bar([i - 0.2 for i in x], [real.get(k, 0) / n_r for k in lengths], width=0.4, label="real")
    ax.bar([i + 0.2 for i in x], [synth.get(k, 0) / n_s for k in lengths], width=0.4, label="synthetic")
    ax.set_xticks(list(x), [str(k) for k in lengths])
    ax.set_xlabel("length")
    ax.set_ylabel("share")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


"""Figures written next to the CSV/PGM outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402


def plot_training(rows, path) -> None:
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("total", "ce_lstm", "ce_3d"):
        ax_loss.plot(epochs, [r[key] for r in rows], marker="o", label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss per clip")
    ax_loss.legend()
    ax_acc.plot(epochs, [r["train_acc"] for r in rows], marker="o", label="train (clips)")
    ax_acc.plot(epochs, [r["test_acc"] for r in rows], marker="s", label="test (videos)")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_confusion(confusion: np.ndarray, path, names=None) -> None:
    n = confusion.shape[0]
    names = list(names or CLASS_NAMES[:n])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.imshow(confusion, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(confusion[i, j]), ha="center", va="center", fontsize=9)
    ax.set_xticks(range(n), names, rotation=45, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_attention(frames: np.ndarray, maps: np.ndarray, boxes: np.ndarray, k: int, path, columns: int = 6) -> None:
    """Frames with their attention map overlaid and the ground-truth box."""
    steps = np.linspace(0, len(maps) - 1, num=min(columns, len(maps))).astype(int)
    size = frames.shape[-1]
    fig, axes = plt.subplots(2, len(steps), figsize=(2 * len(steps), 4), squeeze=False)
    for col, t in enumerate(steps):
        up = np.kron(maps[t].reshape(k, k), np.ones((size // k, size // k)))
        x0, y0, x1, y1 = boxes[t]
        rect = dict(fill=False, edgecolor="red", linewidth=1)
        axes[0, col].imshow(up, cmap="gray")
        axes[0, col].add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, **rect))
        axes[1, col].imshow(frames[t], cmap="gray", vmin=0, vmax=1)
        axes[1, col].add_patch(plt.Rectangle((x0 - 0.5, y0 - 0.5), x1 - x0, y1 - y0, **rect))
        axes[0, col].set_title(f"t={t}")
        for ax in axes[:, col]:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)

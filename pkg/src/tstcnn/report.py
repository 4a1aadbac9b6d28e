"""Metrics files, mask exports, and report figures.

The metrics CSV is the canonical training artifact (append-only, one row
per epoch, reproducible bit-exactly for a fixed seed). The report commands
(eval, compare, export-masks) additionally render matplotlib figures next
to their delimited outputs; figures never feed back into training.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "val_acc", "lr", "action")

__all__ = [
    "METRICS_COLUMNS",
    "MetricsWriter",
    "read_metrics",
    "write_pgm",
    "normalize_to_bytes",
    "convergence_figure",
    "confusion_figure",
    "mask_figure",
]


class MetricsWriter:
    """Append-only CSV with one row per epoch, flushed at every row."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fp = open(self.path, "w", encoding="utf-8", newline="\n")
        self._fp.write(",".join(METRICS_COLUMNS) + "\n")
        self._fp.flush()

    def append(self, epoch: int, train_loss: float, train_acc: float, val_acc: float,
               lr: float, action: str) -> None:
        row = f"{epoch},{train_loss:.10g},{train_acc:.10g},{val_acc:.10g},{lr:.10g},{action}\n"
        self._fp.write(row)
        self._fp.flush()
        os.fsync(self._fp.fileno())

    def close(self) -> None:
        self._fp.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> List[dict]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split(",") != list(METRICS_COLUMNS):
        raise ValueError(f"{path}: not a metrics file")
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        rows.append(
            dict(
                epoch=int(parts[0]),
                train_loss=float(parts[1]),
                train_acc=float(parts[2]),
                val_acc=float(parts[3]),
                lr=float(parts[4]),
                action=parts[5],
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Mask export


def normalize_to_bytes(plane: np.ndarray) -> np.ndarray:
    """Min-max normalize to the full 0..255 range; constant planes map to 0."""
    lo = float(plane.min())
    hi = float(plane.max())
    if hi <= lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    scaled = (plane.astype(np.float64) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_pgm(path, plane: np.ndarray) -> None:
    """Binary 8-bit grayscale portable graymap (P5)."""
    data = np.ascontiguousarray(plane, dtype=np.uint8)
    h, w = data.shape
    with open(path, "wb") as fp:
        fp.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fp.write(data.tobytes())


# ---------------------------------------------------------------------------
# Figures


def convergence_figure(path, curves: Sequence[tuple], threshold: Optional[float] = None) -> None:
    """Validation-accuracy curves, one line per (label, values)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, values in curves:
        ax.plot(np.arange(1, len(values) + 1), values, label=label, linewidth=1.4)
    if threshold is not None:
        ax.axhline(threshold, color="gray", linestyle="--", linewidth=1, label=f"threshold {threshold:g}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def confusion_figure(path, matrix: np.ndarray, class_names: Sequence[str]) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center", fontsize=8,
                    color="black" if matrix[i, j] < matrix.max() * 0.6 else "white")
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def mask_figure(path, planes: Sequence[np.ndarray], titles: Sequence[str]) -> None:
    n = len(planes)
    fig, axes = plt.subplots(1, n, figsize=(2.1 * n, 2.4))
    if n == 1:
        axes = [axes]
    for ax, plane, title in zip(axes, planes, titles):
        ax.imshow(plane, cmap="gray", vmin=0, vmax=255)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)

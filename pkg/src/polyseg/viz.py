"""Standardized figures: the 1x4 inference grid and grouped metric bar charts."""
from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from scipy import ndimage

from .metrics import ReportRow

GRID_PAD = 4
PAD_COLOR = (1.0, 1.0, 1.0)
PRED_COLOR = (0.0, 1.0, 0.0)  # prediction boundary
GT_COLOR = (1.0, 0.0, 0.0)    # ground-truth boundary, drawn first


def _boundary(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=np.ones((3, 3), dtype=bool))


def _to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray.astype(np.float64)[:, :, None], 3, axis=2)


def render_grid(image: np.ndarray, gt_mask: np.ndarray, pred_map: np.ndarray,
                threshold: float = 0.5) -> np.ndarray:
    """Four panels: input | GT mask | thresholded prediction | boundary overlay.

    Overlay draws the GT boundary in red first, then the prediction boundary
    in green on top, over the input image. Output width is 4*W + 3*GRID_PAD.
    """
    h, w = image.shape[:2]
    if gt_mask.shape != (h, w) or pred_map.shape != (h, w):
        raise ValueError("image, mask and prediction shapes must agree")
    pred_bin = (pred_map >= threshold).astype(np.uint8)

    overlay = image.astype(np.float64).copy()
    overlay[_boundary(gt_mask)] = GT_COLOR
    overlay[_boundary(pred_bin)] = PRED_COLOR

    panels = [image.astype(np.float64), _to_rgb(gt_mask), _to_rgb(pred_bin), overlay]
    out = np.empty((h, 4 * w + 3 * GRID_PAD, 3), dtype=np.float64)
    out[:] = PAD_COLOR
    for i, panel in enumerate(panels):
        x0 = i * (w + GRID_PAD)
        out[:, x0:x0 + w] = panel
    return np.clip(out, 0.0, 1.0)


METRIC_COLORS = {
    "iou": "#4c72b0", "dice": "#dd8452", "precision": "#55a868",
    "recall": "#c44e52", "f1": "#8172b3", "psnr": "#937860", "ssim": "#da8bc3",
}


def render_metric_bars(rows: list[ReportRow], metrics: list[str], path: Path) -> Path:
    """Grouped bar chart, one group per architecture, value labels to 4 decimals."""
    if not rows:
        raise ValueError("need at least one report row")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archs = [r.arch for r in rows]
    n_groups, n_metrics = len(archs), len(metrics)
    x = np.arange(n_groups)
    width = 0.8 / n_metrics

    fig, ax = plt.subplots(figsize=(2.0 + 1.6 * n_groups, 4.5))
    for j, m in enumerate(metrics):
        vals = [getattr(r, m) for r in rows]
        vals = [0.0 if v != v or v == float("inf") else v for v in vals]
        bars = ax.bar(x + (j - (n_metrics - 1) / 2) * width, vals, width,
                      label=m, color=METRIC_COLORS.get(m))
        for rect, v in zip(bars, vals):
            ax.annotate(f"{v:.4f}", (rect.get_x() + rect.get_width() / 2, rect.get_height()),
                        ha="center", va="bottom", fontsize=6, rotation=90)
    ax.set_xticks(x)
    ax.set_xticklabels(archs)
    ax.set_ylabel(" / ".join(metrics))
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

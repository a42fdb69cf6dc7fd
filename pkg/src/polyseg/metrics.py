"""Evaluation metric battery: pixel confusion metrics (IoU, Dice, precision,
recall, F1), image quality metrics (PSNR, windowed SSIM), per-model report
assembly and CSV output.

PSNR/SSIM compare the predicted probability map against the ground-truth mask
treated as a real-valued image in [0,1]; that convention is recorded in the
report header.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .data import DatasetManifest, ManifestEntry, load_image, load_mask

REPORT_COLUMNS = ["arch", "iou", "dice", "precision", "recall", "f1", "psnr", "ssim", "n"]
REPORT_HEADER_NOTE = "# psnr/ssim compare predicted probability maps against ground-truth masks as [0,1] images\n"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")


@dataclass
class ReportRow:
    arch: str
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float
    psnr: float
    ssim: float
    n_samples: int
    undefined: list[str] = field(default_factory=list)
    skipped: int = 0


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(gt, (0, 1)).all():
        raise ValueError("confusion counts need binary masks")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> tuple[float, bool]:
    """(value, defined); zero denominators report 0 with defined=False."""
    if den == 0:
        return 0.0, False
    return num / den, True


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)[0]


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)[0]


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)[0]


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return _ratio(2 * p * r, p + r)[0]


def f1_from_pr(p: float, r: float) -> float:
    """Harmonic mean of a precision/recall pair."""
    return _ratio(2 * p * r, p + r)[0]


def undefined_metrics(c: ConfusionCounts) -> list[str]:
    """Names of metrics whose denominator is zero for these counts."""
    out = []
    if c.tp + c.fp + c.fn == 0:
        out.extend(["iou", "dice"])
    if c.tp + c.fp == 0:
        out.append("precision")
    if c.tp + c.fn == 0:
        out.append("recall")
    if precision(c) + recall(c) == 0:
        out.append("f1")
    return out


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """10*log10(1/MSE) with peak 1.0; +inf for identical inputs."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred.astype(np.float64) - ref.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, ref: np.ndarray) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), L = 1."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    x = pred.astype(np.float64)
    y = ref.astype(np.float64)
    kernel = _gaussian_kernel()

    def filt(a):
        return ndimage.convolve(a, kernel, mode="reflect")

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x ** 2
    sigma_y = filt(y * y) - mu_y ** 2
    sigma_xy = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    # interior only, so boundary padding does not skew the mean
    half = SSIM_WINDOW // 2
    smap = (num / den)[half:h - half, half:w - half]
    return float(smap.mean())


def evaluate_model(model, entries: list[ManifestEntry], root: Path, arch: str,
                   threshold: float = 0.5, mask_source: str = "gt") -> ReportRow:
    """Forward every sample, score the probability map, and average per-sample.

    mask_source picks the reference: 'gt' for generator masks, 'sam' for
    prompt-generated ones. Samples without a reference mask are skipped and
    counted in the row.
    """
    if not entries:
        raise ValueError("evaluation split is empty")
    root = Path(root)
    rows = []
    undefined: set[str] = set()
    skipped = 0
    model.eval()
    for entry in sorted(entries, key=lambda e: e.sample_id):
        mask_rel = entry.mask_path if mask_source == "gt" else entry.sam_mask_path
        if mask_rel is None:
            skipped += 1
            continue
        image = load_image(root / entry.image_path)
        gt = load_mask(root / mask_rel)
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
        with torch.no_grad():
            prob = model(x)[0, 0].numpy().astype(np.float64)
        counts = confusion_counts((prob >= threshold).astype(np.uint8), gt)
        undefined.update(undefined_metrics(counts))
        rows.append((iou(counts), dice(counts), precision(counts), recall(counts), f1(counts),
                     psnr(prob, gt.astype(np.float64)), ssim(prob, gt.astype(np.float64))))
    if not rows:
        raise ValueError("no evaluable samples (all were missing reference masks)")
    means = [float(np.mean([r[i] for r in rows])) for i in range(7)]
    return ReportRow(arch=arch, iou=means[0], dice=means[1], precision=means[2],
                     recall=means[3], f1=means[4], psnr=means[5], ssim=means[6],
                     n_samples=len(rows), undefined=sorted(undefined), skipped=skipped)


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


ARCH_ORDER = ["unet", "pspnet", "fpn", "linknet", "manet"]


def write_report(rows: list[ReportRow], path: Path) -> Path:
    """CSV report, one row per architecture, fixed column order, 6 decimals."""
    if not rows:
        raise ValueError("report needs at least one row")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: ARCH_ORDER.index(r.arch) if r.arch in ARCH_ORDER else len(ARCH_ORDER))
    lines = [REPORT_HEADER_NOTE, ",".join(REPORT_COLUMNS) + "\n"]
    for r in ordered:
        lines.append(
            ",".join([r.arch] + [_fmt(v) for v in (r.iou, r.dice, r.precision, r.recall, r.f1, r.psnr, r.ssim)]
                     + [str(r.n_samples)]) + "\n"
        )
    path.write_text("".join(lines))
    return path

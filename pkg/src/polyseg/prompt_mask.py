"""Box-prompted mask generation: the promptable-segmenter contract, a
deterministic reference segmenter, and the ground-truth generation pass
that writes prompt masks under SAM-Results/."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from . import data as datamod
from .data import DatasetManifest, load_image, save_mask
from .detection import DetectorModel, detect, nms
from .geometry import BoundingBox

logger = logging.getLogger(__name__)


@dataclass
class SegmentationMask:
    data: np.ndarray  # H x W
    kind: str  # "binary" | "probability"

    def __post_init__(self):
        if self.kind == "binary":
            if not np.isin(self.data, (0, 1)).all():
                raise ValueError("binary mask must contain only {0,1}")
        elif self.kind == "probability":
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValueError("probability mask must lie in [0,1]")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")


@runtime_checkable
class PromptableSegmenter(Protocol):
    """One capability: (image, box prompt) -> probability mask over the image."""

    def segment(self, image: np.ndarray, box: BoundingBox) -> SegmentationMask:
        ...


def _between_class_threshold(values: np.ndarray, bins: int = 64) -> float:
    """Intensity threshold maximizing the between-class variance (Otsu)."""
    hist, edges = np.histogram(values, bins=bins, range=(float(values.min()), float(values.max())))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(np.float64)
    total = w.sum()
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    mean_total = cum_m[-1] / total
    valid = (cum_w > 0) & (cum_w < total)
    if not valid.any():
        return float(centers[0])
    w0 = cum_w[valid] / total
    m0 = cum_m[valid] / cum_w[valid]
    between = w0 / (1 - w0) * (m0 - mean_total) ** 2
    return float(centers[np.flatnonzero(valid)[int(np.argmax(between))]])


class ReferenceSegmenter:
    """Deterministic box-guided segmenter.

    Inside the box the grayscale image is split by a between-class-variance
    threshold; the probability is a logistic of the signed distance from that
    threshold scaled by the interior intensity spread. After thresholding at
    0.5 (>= convention) only the connected component containing the box center
    survives; everything outside the box is 0. A constant-intensity interior
    degenerates to probability 0.5 everywhere inside, which the >= convention
    resolves to the full box.
    """

    def __init__(self, spread_scale: float = 0.5, min_spread: float = 1e-6):
        self.spread_scale = spread_scale
        self.min_spread = min_spread

    def segment(self, image: np.ndarray, box: BoundingBox) -> SegmentationMask:
        h, w = image.shape[:2]
        b = box.clip(h, w)
        r0, r1 = int(np.floor(b.y_min)), int(np.ceil(b.y_max))
        c0, c1 = int(np.floor(b.x_min)), int(np.ceil(b.x_max))
        gray = image[r0:r1, c0:c1]
        if gray.ndim == 3:
            gray = gray.mean(axis=2)

        prob = np.zeros((h, w), dtype=np.float64)
        spread = float(gray.std())
        if spread < self.min_spread:
            inner = np.full(gray.shape, 0.5)
        else:
            t = _between_class_threshold(gray)
            inner = 1.0 / (1.0 + np.exp(-(gray - t) / (self.spread_scale * spread)))

        binary = inner >= 0.5
        labelled, _ = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
        cr = min(max((r1 - r0) // 2, 0), gray.shape[0] - 1)
        cc = min(max((c1 - c0) // 2, 0), gray.shape[1] - 1)
        center_label = labelled[cr, cc]
        keep = labelled == center_label if center_label > 0 else np.zeros_like(binary)
        prob[r0:r1, c0:c1] = inner * keep
        return SegmentationMask(data=prob, kind="probability")


def boxes_to_mask(image: np.ndarray, boxes: list[BoundingBox], seg: PromptableSegmenter,
                  threshold: float = 0.5) -> SegmentationMask:
    """Threshold each per-box probability mask (>= convention) and OR-combine."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie strictly between 0 and 1")
    h, w = image.shape[:2]
    combined = np.zeros((h, w), dtype=np.uint8)
    for box in boxes:
        prob = seg.segment(image, box)
        combined |= (prob.data >= threshold).astype(np.uint8)
    return SegmentationMask(data=combined, kind="binary")


def generate_groundtruth(manifest: DatasetManifest, detector: DetectorModel,
                         segmenter: PromptableSegmenter, score_threshold: float = 0.5,
                         nms_iou: float = 0.5, mask_threshold: float = 0.5) -> DatasetManifest:
    """detect -> boxes_to_mask -> write under SAM-Results/ for every sample.

    Per-sample failures are logged and skipped; the pass always completes.
    """
    root = Path(manifest.root)
    out_dir = root / datamod.SAM_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        try:
            image = load_image(root / entry.image_path)
            dets = nms(detect(image, detector, score_threshold, sample_id=entry.sample_id), nms_iou)
            if not dets:
                logger.warning("no detections for %s; writing an all-zero mask", entry.sample_id)
            mask = boxes_to_mask(image, [d.box for d in dets], segmenter, mask_threshold)
            rel = f"{datamod.SAM_DIR}/{entry.sample_id}.png"
            save_mask(mask.data, root / rel)
            entry.sam_mask_path = rel
        except OSError as exc:
            logger.error("ground-truth generation failed for %s: %s", entry.sample_id, exc)
    return manifest

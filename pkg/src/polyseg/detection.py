"""Bounding-box detection: detector contract, reference anchor detector, NMS,
matching metrics, and the text serialization format.

Box text format, one detection per line:
    class_id x_min y_min x_max y_max confidence
with six decimal places on the floats.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn

from .geometry import BoundingBox, box_iou

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0,1]")


@dataclass
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    undefined: list[str] = field(default_factory=list)  # metrics with zero denominator


@runtime_checkable
class DetectorModel(Protocol):
    """Anything that maps an image to detections, deterministically in inference."""

    def predict(self, image: np.ndarray, sample_id: str | None = None) -> list[Detection]:
        ...


class OracleDetector:
    """Replays stored ground-truth boxes with confidence 1.0, keyed by sample id."""

    def __init__(self, boxes_by_id: dict[str, list[BoundingBox]]):
        self.boxes_by_id = boxes_by_id

    def predict(self, image, sample_id=None):
        if sample_id is None:
            raise ValueError("OracleDetector needs a sample id")
        return [Detection(box=b, confidence=1.0) for b in self.boxes_by_id.get(sample_id, [])]


def detect(image: np.ndarray, model: DetectorModel, score_threshold: float = 0.5,
           sample_id: str | None = None) -> list[Detection]:
    """Run the detector, clip boxes to the image, filter and sort by confidence."""
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ValueError(f"image dims must be divisible by 32, got {h}x{w}")
    if not (0.0 <= score_threshold <= 1.0):
        raise ValueError("score threshold must lie in [0,1]")
    dets = [
        Detection(box=d.box.clip(h, w), confidence=d.confidence, class_id=d.class_id)
        for d in model.predict(image, sample_id=sample_id)
        if d.confidence >= score_threshold
    ]
    dets.sort(key=lambda d: -d.confidence)
    return dets


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression: keep a detection iff its IoU with every kept
    detection of the same class stays below the threshold."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError("iou_threshold must lie in (0,1]")
    ordered = sorted(dets, key=lambda d: -d.confidence)
    kept: list[Detection] = []
    for d in ordered:
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) < iou_threshold for k in kept):
            kept.append(d)
    return kept


def match_detections(preds: list[Detection], gts: list[BoundingBox],
                     iou_threshold: float = 0.5) -> DetectionMetrics:
    """Greedy one-to-one matching in descending confidence order."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError("iou_threshold must lie in (0,1]")
    ordered = sorted(preds, key=lambda d: -d.confidence)
    matched = [False] * len(gts)
    tp = 0
    for d in ordered:
        best, best_iou = -1, 0.0
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            iou = box_iou(d.box, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            tp += 1
    fp = len(preds) - tp
    fn = len(gts) - tp

    undefined = []
    if tp + fp == 0:
        precision, flag = 0.0, True
    else:
        precision, flag = tp / (tp + fp), False
    if flag:
        undefined.append("precision")
    if tp + fn == 0:
        recall = 0.0
        undefined.append("recall")
    else:
        recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return DetectionMetrics(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1,
                            undefined=undefined)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

class DetectionParseError(ValueError):
    pass


def serialize_detections(dets: list[Detection]) -> str:
    lines = [
        f"{d.class_id} {d.box.x_min:.6f} {d.box.y_min:.6f} {d.box.x_max:.6f} {d.box.y_max:.6f} {d.confidence:.6f}\n"
        for d in dets
    ]
    return "".join(lines)


def parse_detections(text: str) -> list[Detection]:
    dets = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise DetectionParseError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        try:
            cid = int(parts[0])
            x0, y0, x1, y1, conf = map(float, parts[1:])
        except ValueError as exc:
            raise DetectionParseError(f"line {lineno}: {exc}") from exc
        dets.append(Detection(box=BoundingBox(x0, y0, x1, y1), confidence=conf, class_id=cid))
    return dets


# ---------------------------------------------------------------------------
# annotation
# ---------------------------------------------------------------------------

ANNOTATION_COLOR = (1.0, 0.0, 0.0)  # red, 2 px
ANNOTATION_WIDTH = 2


def annotate_image(image: np.ndarray, dets: list[Detection]) -> np.ndarray:
    """Copy of the image with a red 2-px rectangle per detection box."""
    out = image.copy()
    h, w = out.shape[:2]
    t = ANNOTATION_WIDTH
    for d in dets:
        b = d.box.clip(h, w)
        r0, r1 = int(round(b.y_min)), int(round(b.y_max))
        c0, c1 = int(round(b.x_min)), int(round(b.x_max))
        border = np.zeros((h, w), dtype=bool)
        border[r0:r1, c0:c1] = True
        border[r0 + t:r1 - t, c0 + t:c1 - t] = False
        out[border] = ANNOTATION_COLOR
    return out


# ---------------------------------------------------------------------------
# reference anchor detector
# ---------------------------------------------------------------------------

ANCHOR_STRIDE = 16
ANCHOR_SIZE = 20.0


@dataclass
class DetectorTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    box_loss_weight: float = 1.0


class AnchorDetector(nn.Module):
    """Single-stage detector: one anchor per 16-px grid cell, objectness +
    4-value box regression decoded against a fixed square anchor."""

    def __init__(self, channels: int = 32, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            c = channels

            def block(cin, cout):
                return nn.Sequential(
                    nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                    nn.GroupNorm(min(8, cout), cout),
                    nn.ReLU(inplace=True),
                )

            self.backbone = nn.Sequential(block(3, c // 2), block(c // 2, c), block(c, c), block(c, c))
            self.head = nn.Conv2d(c, 5, 1)  # objectness logit + (tx, ty, tw, th)

    def forward(self, x):
        return self.head(self.backbone(x))

    @torch.no_grad()
    def predict(self, image: np.ndarray, sample_id: str | None = None) -> list[Detection]:
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
        raw = self.forward(x)[0]
        obj = torch.sigmoid(raw[0])
        gy, gx = torch.meshgrid(torch.arange(obj.shape[0]), torch.arange(obj.shape[1]), indexing="ij")
        cx = (gx + torch.sigmoid(raw[1])) * ANCHOR_STRIDE
        cy = (gy + torch.sigmoid(raw[2])) * ANCHOR_STRIDE
        bw = ANCHOR_SIZE * torch.exp(raw[3].clamp(-4, 4))
        bh = ANCHOR_SIZE * torch.exp(raw[4].clamp(-4, 4))
        dets = []
        keep = (obj >= 0.05).nonzero(as_tuple=False)
        for r, c in keep.tolist():
            half_w, half_h = bw[r, c].item() / 2, bh[r, c].item() / 2
            box = BoundingBox(cx[r, c].item() - half_w, cy[r, c].item() - half_h,
                              cx[r, c].item() + half_w, cy[r, c].item() + half_h)
            dets.append(Detection(box=box, confidence=obj[r, c].item()))
        return dets


def _cell_targets(boxes: list[BoundingBox], grid_h: int, grid_w: int):
    """Objectness map and (tx, ty, tw, th) regression targets per positive cell."""
    obj = np.zeros((grid_h, grid_w), dtype=np.float32)
    reg = np.zeros((4, grid_h, grid_w), dtype=np.float32)
    for b in boxes:
        cx, cy = b.center
        gc = min(int(cx // ANCHOR_STRIDE), grid_w - 1)
        gr = min(int(cy // ANCHOR_STRIDE), grid_h - 1)
        obj[gr, gc] = 1.0
        # inverse of the decode; logit of the in-cell offset, log of the size ratio
        fx = np.clip(cx / ANCHOR_STRIDE - gc, 1e-4, 1 - 1e-4)
        fy = np.clip(cy / ANCHOR_STRIDE - gr, 1e-4, 1 - 1e-4)
        reg[0, gr, gc] = np.log(fx / (1 - fx))
        reg[1, gr, gc] = np.log(fy / (1 - fy))
        reg[2, gr, gc] = np.log(max(b.width, 1.0) / ANCHOR_SIZE)
        reg[3, gr, gc] = np.log(max(b.height, 1.0) / ANCHOR_SIZE)
    return obj, reg


def train_detector(model: AnchorDetector, samples: list[tuple[np.ndarray, list[BoundingBox]]],
                   config: DetectorTrainConfig) -> tuple[AnchorDetector, list[float]]:
    """Train on (image, gt_boxes) pairs; objectness BCE + L1 box loss on positives.

    Returns the updated model and the per-epoch mean loss.
    """
    if config.epochs > 0 and not samples:
        raise ValueError("empty training set")
    for _, boxes in samples:
        if config.epochs > 0 and not boxes:
            raise ValueError("every detector training sample needs ground-truth boxes")

    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    bce = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    history = []
    for _epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(samples), config.batch_size):
            idx = order[start:start + config.batch_size]
            imgs, objs, regs = [], [], []
            for i in idx:
                image, boxes = samples[i]
                h, w = image.shape[:2]
                obj, reg = _cell_targets(boxes, h // ANCHOR_STRIDE, w // ANCHOR_STRIDE)
                imgs.append(image.transpose(2, 0, 1))
                objs.append(obj)
                regs.append(reg)
            x = torch.from_numpy(np.stack(imgs)).float()
            obj_t = torch.from_numpy(np.stack(objs))
            reg_t = torch.from_numpy(np.stack(regs))
            raw = model(x)
            loss = bce(raw[:, 0], obj_t)
            pos = obj_t > 0.5
            if pos.any():
                # offsets compared in logit space, sizes in log space
                diff = (raw[:, 1:] - reg_t).abs().sum(dim=1)
                loss = loss + config.box_loss_weight * diff[pos].mean()
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite detector loss at epoch {_epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return model, history

"""Synthetic sample generation, on-disk dataset layout, manifests, splits, augmentation.

Layout (relative to a dataset root):
    synthetic/    RGB images (8-bit PNG)
    masks/        ground-truth binary masks ({0,255} single channel PNG)
    SAM-Results/  prompt-generated masks, written by the prompt-mask stage
    results/      detections, annotated images, checkpoints, reports, figures
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import BoundingBox, boxes_from_mask

IMAGE_DIR = "synthetic"
MASK_DIR = "masks"
SAM_DIR = "SAM-Results"
RESULTS_DIR = "results"
MANIFEST_NAME = "manifest.json"

MASK_READ_THRESHOLD = 128  # stored {0,255}; anything >= this reads back as 1


class Label(str, Enum):
    POLYPS = "Polyps"
    NON_POLYPS = "Non-Polyps"


@dataclass
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3 float in [0,1], H and W divisible by 32
    gt_boxes: list[BoundingBox]
    gt_mask: np.ndarray | None  # H x W binary {0,1}
    label: Label


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    mask_path: str | None = None
    box_path: str | None = None
    sam_mask_path: str | None = None
    split: str = "unassigned"  # train | val | unassigned


@dataclass
class DatasetManifest:
    root: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)  # files seen but not indexable

    def split_entries(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]


@dataclass
class AugmentationConfig:
    rotation_max_deg: float = 30.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    brightness_delta: float = 0.2
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 <= self.hflip_prob <= 1.0 and 0.0 <= self.vflip_prob <= 1.0):
            raise ValueError("flip probabilities must lie in [0,1]")
        if not (0.0 < lo <= hi):
            raise ValueError("scale range must satisfy 0 < lo <= hi")
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")


@dataclass(frozen=True)
class GeometricParams:
    """The transform actually drawn for one augmentation call."""

    angle_deg: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False
    brightness: float = 0.0

    @property
    def is_identity_geometry(self) -> bool:
        return self.angle_deg == 0.0 and self.scale == 1.0 and not self.hflip and not self.vflip


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def _check_size(size) -> tuple[int, int]:
    h, w = int(size[0]), int(size[1])
    if h % 32 or w % 32:
        raise ValueError(f"image size must be divisible by 32, got {h}x{w}")
    if h < 64 or w < 64:
        raise ValueError(f"image size must be at least 64x64, got {h}x{w}")
    return h, w


def _low_freq_noise(rng, h, w, cell=16):
    coarse = rng.normal(size=(h // cell + 2, w // cell + 2))
    up = ndimage.zoom(coarse, cell, order=1)
    return up[:h, :w]


def _ellipse_field(h, w, cy, cx, ry, rx, theta):
    """Normalized ellipse quadratic: <=1 inside, 1 on the boundary."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2


def generate_synthetic_sample(seed: int, label: Label, size: tuple[int, int]) -> ImageSample:
    """Procedural colonoscopy-like sample, deterministic in (seed, label, size).

    Polyps samples carry 1-3 disjoint bright elliptical blobs; the GT mask is
    the union of the exact ellipse supports and each box is tight around its
    blob. Non-Polyps samples are background only.
    """
    h, w = _check_size(size)
    rng = np.random.default_rng([int(seed), 1 if label == Label.POLYPS else 0, h, w])

    base = np.array([0.72, 0.42, 0.44])  # pinkish mucosa tone
    image = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        image[:, :, c] = base[c] + 0.05 * _low_freq_noise(rng, h, w) + 0.015 * rng.normal(size=(h, w))

    mask = np.zeros((h, w), dtype=np.uint8)
    boxes: list[BoundingBox] = []

    if label == Label.POLYPS:
        n_blobs = int(rng.integers(1, 4))
        placed = []  # (cy, cx, r_outer) for the separation check
        for _ in range(n_blobs):
            for _attempt in range(50):
                ry = float(rng.uniform(0.09, 0.18) * h)
                rx = float(rng.uniform(0.09, 0.18) * w)
                theta = float(rng.uniform(0, math.pi))
                r_out = max(ry, rx)
                margin = r_out + 3
                cy = float(rng.uniform(margin, h - margin))
                cx = float(rng.uniform(margin, w - margin))
                # keep blobs separated so mask components map 1:1 to boxes
                if all(math.hypot(cy - py, cx - px) > r_out + pr + 4 for py, px, pr in placed):
                    placed.append((cy, cx, r_out))
                    q = _ellipse_field(h, w, cy, cx, ry, rx, theta)
                    support = q <= 1.0
                    if not support.any():
                        continue
                    # mostly flat bump with a thin soft rim, brighter than background
                    profile = np.clip((1.0 - q) / 0.15, 0.0, 1.0)
                    contrast = rng.uniform(0.30, 0.42)
                    tint = np.array([1.0, 0.85, 0.6])  # lighter, slightly yellowish
                    for c in range(3):
                        image[:, :, c] += contrast * tint[c] * profile
                    mask |= support.astype(np.uint8)
                    break

        for c in range(3):
            image[:, :, c] = ndimage.gaussian_filter(image[:, :, c], sigma=0.8)
        boxes = boxes_from_mask(mask)
    else:
        for c in range(3):
            image[:, :, c] = ndimage.gaussian_filter(image[:, :, c], sigma=0.8)

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    prefix = "p" if label == Label.POLYPS else "n"
    return ImageSample(id=f"{prefix}{seed:05d}", image=image, gt_boxes=boxes, gt_mask=mask, label=label)


# ---------------------------------------------------------------------------
# disk layout
# ---------------------------------------------------------------------------

def save_image(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path)


def load_mask(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= MASK_READ_THRESHOLD).astype(np.uint8)


def write_sample(sample: ImageSample, root: Path) -> ManifestEntry:
    """Write one sample into the dataset layout and return its manifest entry."""
    root = Path(root)
    img_dir = root / IMAGE_DIR
    mask_dir = root / MASK_DIR
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        image_rel = f"{IMAGE_DIR}/{sample.id}.png"
        save_image(sample.image, root / image_rel)
        mask_rel = None
        if sample.gt_mask is not None:
            mask_rel = f"{MASK_DIR}/{sample.id}.png"
            save_mask(sample.gt_mask, root / mask_rel)
    except OSError as exc:
        raise OSError(f"cannot write sample under {root}: {exc}") from exc
    return ManifestEntry(sample_id=sample.id, image_path=image_rel, mask_path=mask_rel)


def build_manifest(root: Path, seed: int = 0) -> DatasetManifest:
    """Index root/synthetic and attach mask / box / prompt-mask files when present."""
    root = Path(root)
    img_dir = root / IMAGE_DIR
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")

    manifest = DatasetManifest(root=str(root), seed=seed)
    for path in sorted(img_dir.iterdir()):
        sid = path.stem
        if path.suffix.lower() != ".png" or not sid or any(ch.isspace() for ch in sid):
            manifest.skipped.append(path.name)
            continue
        entry = ManifestEntry(sample_id=sid, image_path=f"{IMAGE_DIR}/{path.name}")
        if (root / MASK_DIR / f"{sid}.png").exists():
            entry.mask_path = f"{MASK_DIR}/{sid}.png"
        if (root / RESULTS_DIR / "detections" / f"{sid}.txt").exists():
            entry.box_path = f"{RESULTS_DIR}/detections/{sid}.txt"
        if (root / SAM_DIR / f"{sid}.png").exists():
            entry.sam_mask_path = f"{SAM_DIR}/{sid}.png"
        manifest.entries.append(entry)
    manifest.entries.sort(key=lambda e: e.sample_id)
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path | None = None) -> Path:
    path = Path(path) if path else Path(manifest.root) / MANIFEST_NAME
    doc = {
        "root": ".",
        "seed": manifest.seed,
        "entries": [
            {
                "id": e.sample_id,
                "image": e.image_path,
                "mask": e.mask_path,
                "boxes": e.box_path,
                "sam_mask": e.sam_mask_path,
                "split": e.split,
            }
            for e in manifest.entries
        ],
        "skipped": manifest.skipped,
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    manifest = DatasetManifest(root=str(path.parent), seed=doc["seed"], skipped=doc.get("skipped", []))
    for rec in doc["entries"]:
        manifest.entries.append(
            ManifestEntry(
                sample_id=rec["id"],
                image_path=rec["image"],
                mask_path=rec["mask"],
                box_path=rec["boxes"],
                sam_mask_path=rec["sam_mask"],
                split=rec["split"],
            )
        )
    return manifest


def split_dataset(manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Seed-keyed shuffle; first floor(N*ratio) ids become train, the rest val.

    The shuffle is keyed on sample ids only, so re-splitting an already split
    manifest with the same (ratio, seed) is a no-op.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(manifest.entries)
    if n < 2:
        raise ValueError("need at least 2 samples to form train and val splits")

    ids = sorted(e.sample_id for e in manifest.entries)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * ratio))
    train_ids = {ids[i] for i in order[:n_train]}

    entries = [replace(e, split="train" if e.sample_id in train_ids else "val") for e in manifest.entries]
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------------------
# paired augmentation
# ---------------------------------------------------------------------------

def draw_augmentation(cfg: AugmentationConfig, rng: np.random.Generator) -> GeometricParams:
    angle = float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)) if cfg.rotation_max_deg > 0 else 0.0
    scale = float(rng.uniform(*cfg.scale_range))
    hflip = bool(rng.random() < cfg.hflip_prob)
    vflip = bool(rng.random() < cfg.vflip_prob)
    brightness = float(rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)) if cfg.brightness_delta > 0 else 0.0
    return GeometricParams(angle, scale, hflip, vflip, brightness)


def transform_array(arr: np.ndarray, params: GeometricParams, order: int) -> np.ndarray:
    """Rotate/scale about the center then flip. order=0 keeps masks binary."""
    out = arr
    if not (params.angle_deg == 0.0 and params.scale == 1.0):
        theta = math.radians(params.angle_deg)
        c, s = math.cos(theta), math.sin(theta)
        inv = np.array([[c, -s], [s, c]]) / params.scale  # output -> input
        center = (np.array(arr.shape[:2]) - 1) / 2.0
        offset = center - inv @ center
        if arr.ndim == 3:
            out = np.stack(
                [ndimage.affine_transform(arr[:, :, ch], inv, offset=offset, order=order, mode="constant", cval=0.0)
                 for ch in range(arr.shape[2])],
                axis=2,
            )
        else:
            out = ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant", cval=0.0)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def apply_augmentation(sample: ImageSample, params: GeometricParams) -> ImageSample:
    if sample.gt_mask is None:
        raise ValueError("augmentation requires a ground-truth mask")
    if params.is_identity_geometry:
        image, mask = sample.image, sample.gt_mask
    else:
        image = transform_array(sample.image, params, order=1)
        mask = transform_array(sample.gt_mask, params, order=0)
    if params.brightness != 0.0:
        image = image + params.brightness
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    mask = mask.astype(np.uint8)
    return ImageSample(
        id=sample.id,
        image=image,
        gt_boxes=boxes_from_mask(mask),
        gt_mask=mask,
        label=sample.label,
    )


def augment_sample(sample: ImageSample, cfg: AugmentationConfig, rng: np.random.Generator) -> ImageSample:
    """Draw one paired transform and apply it to image and mask together."""
    return apply_augmentation(sample, draw_augmentation(cfg, rng))

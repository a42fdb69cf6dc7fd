"""Training engine: deterministic batching, AdamW with decoupled weight decay,
per-epoch validation, reduce-on-plateau learning rate, early stopping, and
best-checkpoint selection by validation Dice."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics as metmod
from .data import AugmentationConfig, DatasetManifest, ImageSample, Label, load_image, load_mask
from .data import augment_sample
from .geometry import boxes_from_mask
from .losses import LossWeights, hybrid_loss
from .models import ModelConfig, SegmentationModel, build_model

logger = logging.getLogger(__name__)

LR_FLOOR = 1e-5


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4  # carries the objective's L2 term, decoupled
    patience: int = 10
    seed: int = 0
    mixed_precision: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    selection_metric: str = "val_dice"
    augmentation: AugmentationConfig | None = None
    train_dice_stop: float | None = None  # optional early exit for overfit fixtures

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")
        if self.selection_metric != "val_dice":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_dice: float
    val_loss: float
    val_dice: float
    val_iou: float
    learning_rate: float
    wall_time: float


@dataclass
class CheckpointMeta:
    arch: str
    model_config: dict
    seed: int
    epoch: int
    val_dice: float
    param_hash: str


@dataclass
class SplitData:
    """In-memory (image, mask) pairs per split; images are H x W x 3 floats."""

    train: list[tuple[np.ndarray, np.ndarray]]
    val: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, mask_source: str = "gt") -> "SplitData":
        root = Path(manifest.root)
        splits = {"train": [], "val": []}
        for entry in sorted(manifest.entries, key=lambda e: e.sample_id):
            if entry.split not in splits:
                continue
            rel = entry.mask_path if mask_source == "gt" else entry.sam_mask_path
            if rel is None:
                raise ValueError(f"sample {entry.sample_id} has no {mask_source} mask")
            splits[entry.split].append(
                (load_image(root / entry.image_path), load_mask(root / rel))
            )
        return cls(train=splits["train"], val=splits["val"])


def _to_batch(pairs) -> tuple[torch.Tensor, torch.Tensor]:
    imgs = np.stack([p[0].transpose(2, 0, 1) for p in pairs])
    masks = np.stack([p[1][None].astype(np.float32) for p in pairs])
    return torch.from_numpy(imgs).float(), torch.from_numpy(masks)


def param_hash(model: torch.nn.Module) -> str:
    """Content hash over the state dict, stable across save/load."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def validate(model: SegmentationModel, val_pairs, weights: LossWeights,
             threshold: float = 0.5) -> dict:
    """Mean validation loss plus Dice/IoU at the given threshold; no mutation."""
    if not val_pairs:
        raise ValueError("validation split is empty")
    model.eval()
    losses, dices, ious = [], [], []
    with torch.no_grad():
        for image, mask in val_pairs:
            x, t = _to_batch([(image, mask)])
            prob = model(x)
            losses.append(hybrid_loss(prob, t, weights).item())
            counts = metmod.confusion_counts((prob[0, 0].numpy() >= threshold).astype(np.uint8), mask)
            dices.append(metmod.dice(counts))
            ious.append(metmod.iou(counts))
    return {
        "val_loss": float(np.mean(losses)),
        "val_dice": float(np.mean(dices)),
        "val_iou": float(np.mean(ious)),
    }


def _train_dice(model, pairs, threshold=0.5) -> float:
    model.eval()
    vals = []
    with torch.no_grad():
        for image, mask in pairs:
            x, _ = _to_batch([(image, mask)])
            counts = metmod.confusion_counts(
                (model(x)[0, 0].numpy() >= threshold).astype(np.uint8), mask)
            vals.append(metmod.dice(counts))
    return float(np.mean(vals))


def _augment_pairs(pairs, cfg: AugmentationConfig, epoch: int, seed: int):
    out = []
    for i, (image, mask) in enumerate(pairs):
        rng = np.random.default_rng([seed, epoch, i])
        sample = ImageSample(id=f"t{i}", image=image, gt_boxes=boxes_from_mask(mask),
                             gt_mask=mask, label=Label.POLYPS if mask.any() else Label.NON_POLYPS)
        aug = augment_sample(sample, cfg, rng)
        out.append((aug.image, aug.gt_mask))
    return out


def train(model: SegmentationModel, data: SplitData, config: TrainConfig,
          checkpoint_dir: Path | None = None) -> tuple["Checkpoint", list[EpochRecord]]:
    """Train until the epoch budget, early stop, or the optional train-Dice
    target; returns the best-validation checkpoint and the full history."""
    if config.epochs > 0 and (not data.train or not data.val):
        raise ValueError("train and val splits must both be non-empty")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    weights = config.loss_weights

    history: list[EpochRecord] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_dice = -1.0
    best_epoch = 0
    stale = 0
    lr = config.learning_rate

    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        pairs = data.train
        if config.augmentation is not None:
            pairs = _augment_pairs(pairs, config.augmentation, epoch, config.seed)

        model.train()
        order = rng.permutation(len(pairs))
        batch_losses = []
        for bi, start in enumerate(range(0, len(pairs), config.batch_size)):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            x, t = _to_batch(batch)
            if config.mixed_precision:
                with torch.autocast(device_type="cpu", dtype=torch.bfloat16):
                    loss = hybrid_loss(model(x), t, weights)
            else:
                loss = hybrid_loss(model(x), t, weights)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())

        train_dice = _train_dice(model, pairs)
        record = validate(model, data.val, weights)
        history.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            train_dice=train_dice,
            val_loss=record["val_loss"],
            val_dice=record["val_dice"],
            val_iou=record["val_iou"],
            learning_rate=lr,
            wall_time=time.monotonic() - t0,
        ))

        if record["val_dice"] > best_dice:  # ties keep the earlier epoch
            best_dice = record["val_dice"]
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            stale = 0
        else:
            stale += 1
            if stale % max(config.patience // 2, 1) == 0 and lr > LR_FLOOR:
                lr = max(lr * 0.5, LR_FLOOR)
                for group in opt.param_groups:
                    group["lr"] = lr
                logger.info("epoch %d: reducing learning rate to %g", epoch, lr)
            if stale >= config.patience:
                logger.info("early stopping at epoch %d (best %d)", epoch, best_epoch)
                break

        if config.train_dice_stop is not None and train_dice >= config.train_dice_stop:
            logger.info("train Dice target reached at epoch %d", epoch)
            break

    if config.epochs == 0:
        best_dice = validate(model, data.val, weights)["val_dice"] if data.val else 0.0
        best_epoch = 0
    model.load_state_dict(best_state)
    meta = CheckpointMeta(
        arch=model.kind.value,
        model_config=model.config.to_dict(),
        seed=config.seed,
        epoch=best_epoch,
        val_dice=max(best_dice, 0.0),
        param_hash=param_hash(model),
    )
    checkpoint = Checkpoint(meta=meta, state_dict=best_state)
    if checkpoint_dir is not None:
        save_checkpoint(model, meta, Path(checkpoint_dir) / f"{meta.arch}.pt")
    return checkpoint, history


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    state_dict: dict


class CheckpointCorruptionError(RuntimeError):
    pass


def save_checkpoint(model: SegmentationModel, meta: CheckpointMeta, path: Path) -> Path:
    """Parameter blob plus a plain-text metadata sidecar (<path>.json)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "arch": meta.arch,
        "model_config": meta.model_config,
        "seed": meta.seed,
        "epoch": meta.epoch,
        "val_dice": meta.val_dice,
        "param_hash": meta.param_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: Path) -> tuple[SegmentationModel, CheckpointMeta]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    meta = CheckpointMeta(
        arch=sidecar["arch"],
        model_config=sidecar["model_config"],
        seed=sidecar["seed"],
        epoch=sidecar["epoch"],
        val_dice=sidecar["val_dice"],
        param_hash=sidecar["param_hash"],
    )
    model = build_model(ModelConfig.from_dict(meta.model_config))
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    if param_hash(model) != meta.param_hash:
        raise CheckpointCorruptionError(f"parameter hash mismatch for {path}")
    return model, meta


def write_history(history: list[EpochRecord], path: Path) -> Path:
    """One JSON record per line, append-friendly run log."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in history:
            fh.write(json.dumps({
                "epoch": rec.epoch,
                "train_loss": rec.train_loss,
                "train_dice": rec.train_dice,
                "val_loss": rec.val_loss,
                "val_dice": rec.val_dice,
                "val_iou": rec.val_iou,
                "learning_rate": rec.learning_rate,
                "wall_time": rec.wall_time,
            }) + "\n")
    return path

"""Stage orchestration: generate -> detect -> masks -> train -> evaluate ->
visualize, each runnable alone against the shared on-disk layout."""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from . import data as datamod
from .config import CliConfig
from .data import (
    DatasetManifest, Label, build_manifest, generate_synthetic_sample, load_image,
    load_manifest, load_mask, save_image, save_manifest, split_dataset, write_sample,
)
from .detection import (
    AnchorDetector, Detection, OracleDetector, annotate_image, detect, nms,
    parse_detections, serialize_detections, train_detector,
)
from .geometry import boxes_from_mask
from .metrics import evaluate_model, write_report
from .models import build_model
from .prompt_mask import ReferenceSegmenter, generate_groundtruth
from .train import SplitData, load_checkpoint, train, write_history
from .viz import render_grid, render_metric_bars

logger = logging.getLogger(__name__)

STAGES = ["generate", "detect", "masks", "train", "evaluate", "visualize"]


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _manifest(cfg: CliConfig) -> DatasetManifest:
    path = Path(cfg.root) / datamod.MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}; run the generate stage first")
    return load_manifest(path)


def _gt_boxes(manifest: DatasetManifest) -> dict[str, list]:
    root = Path(manifest.root)
    boxes = {}
    for entry in manifest.entries:
        if entry.mask_path:
            boxes[entry.sample_id] = boxes_from_mask(load_mask(root / entry.mask_path))
        else:
            boxes[entry.sample_id] = []
    return boxes


class FileDetector:
    """Replays detections previously serialized to box text files."""

    def __init__(self, root: Path, manifest: DatasetManifest):
        self.paths = {e.sample_id: Path(root) / e.box_path for e in manifest.entries if e.box_path}

    def predict(self, image, sample_id=None):
        path = self.paths.get(sample_id)
        if path is None or not path.exists():
            return []
        return parse_detections(path.read_text())


def _build_detector(cfg: CliConfig, manifest: DatasetManifest, trained=True):
    if cfg.detector.kind == "oracle":
        return OracleDetector(_gt_boxes(manifest))
    if cfg.detector.kind != "anchor":
        raise ValueError(f"unknown detector kind {cfg.detector.kind!r}")
    model = AnchorDetector(channels=cfg.detector.channels, seed=cfg.detector.seed)
    if trained:
        root = Path(manifest.root)
        gt = _gt_boxes(manifest)
        samples = [
            (load_image(root / e.image_path), gt[e.sample_id])
            for e in manifest.split_entries("train")
            if gt[e.sample_id]
        ]
        if not samples:
            raise ValueError("detector training needs train samples with boxes")
        train_detector(model, samples, cfg.detector.train)
    return model


def stage_generate(cfg: CliConfig) -> DatasetManifest:
    root = Path(cfg.root)
    root.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    for i in range(ds.n_polyps):
        write_sample(generate_synthetic_sample(ds.seed + i, Label.POLYPS, ds.image_size), root)
    for i in range(ds.n_nonpolyps):
        write_sample(generate_synthetic_sample(ds.seed + i, Label.NON_POLYPS, ds.image_size), root)
    manifest = build_manifest(root, seed=cfg.seed)
    manifest = split_dataset(manifest, ratio=0.8, seed=cfg.seed)
    save_manifest(manifest)
    logger.info("generated %d samples under %s", len(manifest.entries), root)
    return manifest


def stage_detect(cfg: CliConfig) -> DatasetManifest:
    manifest = _manifest(cfg)
    root = Path(manifest.root)
    detector = _build_detector(cfg, manifest)
    det_dir = root / datamod.RESULTS_DIR / "detections"
    ann_dir = root / datamod.RESULTS_DIR / "annotated"
    det_dir.mkdir(parents=True, exist_ok=True)
    ann_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        image = load_image(root / entry.image_path)
        dets = nms(detect(image, detector, cfg.detector.score_threshold, sample_id=entry.sample_id),
                   cfg.detector.nms_iou)
        (det_dir / f"{entry.sample_id}.txt").write_text(serialize_detections(dets))
        save_image(annotate_image(image, dets), ann_dir / f"{entry.sample_id}.png")
        entry.box_path = f"{datamod.RESULTS_DIR}/detections/{entry.sample_id}.txt"
    save_manifest(manifest)
    return manifest


def stage_masks(cfg: CliConfig) -> DatasetManifest:
    manifest = _manifest(cfg)
    if any(e.box_path for e in manifest.entries):
        detector = FileDetector(Path(manifest.root), manifest)
    else:
        logger.info("no detection files found; using the ground-truth oracle detector")
        detector = OracleDetector(_gt_boxes(manifest))
    segmenter = ReferenceSegmenter()
    manifest = generate_groundtruth(
        manifest, detector, segmenter,
        score_threshold=cfg.detector.score_threshold,
        nms_iou=cfg.detector.nms_iou,
        mask_threshold=cfg.segmenter.mask_threshold,
    )
    save_manifest(manifest)
    return manifest


def stage_train(cfg: CliConfig) -> None:
    manifest = _manifest(cfg)
    root = Path(manifest.root)
    data = SplitData.from_manifest(manifest, mask_source=cfg.train_mask_source)
    train_cfg = cfg.training
    train_cfg.loss_weights = cfg.loss_weights
    if cfg.augment_training:
        train_cfg.augmentation = cfg.augmentation
    for arch in cfg.architectures:
        model = build_model(cfg.model_config_for(arch))
        ckpt_dir = root / datamod.RESULTS_DIR / "checkpoints" / arch
        _, history = train(model, data, train_cfg, checkpoint_dir=ckpt_dir)
        write_history(history, ckpt_dir / "history.jsonl")
        logger.info("trained %s: best val dice over %d epochs", arch, len(history))


def stage_evaluate(cfg: CliConfig) -> Path:
    manifest = _manifest(cfg)
    root = Path(manifest.root)
    val = manifest.split_entries("val")
    rows = []
    for arch in cfg.architectures:
        ckpt = root / datamod.RESULTS_DIR / "checkpoints" / arch / f"{arch}.pt"
        model, _ = load_checkpoint(ckpt)
        rows.append(evaluate_model(model, val, root, arch, threshold=cfg.eval_threshold,
                                   mask_source=cfg.eval_mask_source))
    return write_report(rows, root / datamod.RESULTS_DIR / "metrics.csv")


def _read_report_rows(path: Path):
    from .metrics import ReportRow
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#") or line.startswith("arch,") or not line.strip():
            continue
        parts = line.split(",")
        vals = [float(v) for v in parts[1:8]]
        rows.append(ReportRow(parts[0], *vals, n_samples=int(parts[8])))
    return rows


def stage_visualize(cfg: CliConfig, max_grids: int = 4) -> None:
    import torch

    manifest = _manifest(cfg)
    root = Path(manifest.root)
    grid_dir = root / datamod.RESULTS_DIR / "grids"
    fig_dir = root / datamod.RESULTS_DIR / "figures"
    grid_dir.mkdir(parents=True, exist_ok=True)
    val = [e for e in manifest.split_entries("val") if e.mask_path][:max_grids]
    for arch in cfg.architectures:
        ckpt = root / datamod.RESULTS_DIR / "checkpoints" / arch / f"{arch}.pt"
        model, _ = load_checkpoint(ckpt)
        model.eval()
        for entry in val:
            image = load_image(root / entry.image_path)
            gt = load_mask(root / entry.mask_path)
            x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)
            with torch.no_grad():
                prob = model(x)[0, 0].numpy()
            grid = render_grid(image, gt, prob, cfg.eval_threshold)
            save_image(grid, grid_dir / f"{arch}_{entry.sample_id}.png")

    report_path = root / datamod.RESULTS_DIR / "metrics.csv"
    if report_path.exists():
        rows = _read_report_rows(report_path)
        render_metric_bars(rows, ["iou", "dice", "precision", "recall", "f1"],
                           fig_dir / "segmentation_metrics.png")
        render_metric_bars(rows, ["psnr"], fig_dir / "psnr.png")
        render_metric_bars(rows, ["ssim"], fig_dir / "ssim.png")


_STAGE_FNS = {
    "generate": stage_generate,
    "detect": stage_detect,
    "masks": stage_masks,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "visualize": stage_visualize,
}


def run_stage(name: str, cfg: CliConfig) -> None:
    try:
        _STAGE_FNS[name](cfg)
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: CliConfig) -> int:
    """Execute every stage in order; write a machine-readable run summary."""
    summary = {"seed": cfg.seed, "root": str(Path(cfg.root).resolve()), "stages": []}
    status = 0
    for name in STAGES:
        t0 = time.monotonic()
        try:
            run_stage(name, cfg)
        except StageError as exc:
            logger.error("%s", exc)
            summary["stages"].append({"stage": name, "status": "failed", "error": str(exc.cause),
                                      "seconds": round(time.monotonic() - t0, 3)})
            status = 2
            break
        summary["stages"].append({"stage": name, "status": "ok",
                                  "seconds": round(time.monotonic() - t0, 3)})
    results = Path(cfg.root) / datamod.RESULTS_DIR
    results.mkdir(parents=True, exist_ok=True)
    summary["outputs"] = sorted(str(p.relative_to(cfg.root)) for p in results.rglob("*") if p.is_file())
    (results / "run_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return status

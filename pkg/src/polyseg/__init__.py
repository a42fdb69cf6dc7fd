"""Desk-scale polyp segmentation pipeline: synthetic data, box detection,
prompt-based ground-truth masks, five segmentation architectures, and a
multi-metric evaluation harness."""

from .geometry import BoundingBox, box_iou, boxes_from_mask
from .data import (
    AugmentationConfig, DatasetManifest, ImageSample, Label, ManifestEntry,
    augment_sample, build_manifest, generate_synthetic_sample, split_dataset, write_sample,
)
from .detection import (
    AnchorDetector, Detection, DetectionMetrics, OracleDetector,
    annotate_image, detect, match_detections, nms, parse_detections,
    serialize_detections, train_detector,
)
from .prompt_mask import ReferenceSegmenter, SegmentationMask, boxes_to_mask, generate_groundtruth
from .models import ArchitectureKind, ModelConfig, build_model, encode, load_encoder_weights
from .losses import LossWeights, bce_loss, combined_objective, dice_loss, focal_loss, hybrid_loss
from .train import Checkpoint, SplitData, TrainConfig, load_checkpoint, save_checkpoint
from .metrics import (
    ConfusionCounts, ReportRow, confusion_counts, dice, evaluate_model, f1, f1_from_pr,
    iou, precision, psnr, recall, ssim, write_report,
)
from .viz import render_grid, render_metric_bars
from .config import CliConfig, ConfigError, load_config
from .pipeline import run_pipeline

__version__ = "0.1.0"

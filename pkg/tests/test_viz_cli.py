import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from polyseg.config import CliConfig, ConfigError, config_from_dict, load_config
from polyseg.data import load_image, save_image
from polyseg.metrics import ReportRow
from polyseg.viz import GRID_PAD, render_grid, render_metric_bars
from polyseg.cli import main


class TestRenderGrid:
    def test_layout_arithmetic(self, polyp_sample):
        grid = render_grid(polyp_sample.image, polyp_sample.gt_mask,
                           polyp_sample.gt_mask.astype(float))
        h, w = polyp_sample.image.shape[:2]
        assert grid.shape == (h, 4 * w + 3 * GRID_PAD, 3)

    def test_panels(self, polyp_sample):
        h, w = polyp_sample.image.shape[:2]
        pred = polyp_sample.gt_mask.astype(float)
        grid = render_grid(polyp_sample.image, polyp_sample.gt_mask, pred)
        assert np.array_equal(grid[:, :w], polyp_sample.image.astype(np.float64))
        assert np.array_equal(grid[:, w + GRID_PAD:2 * w + GRID_PAD, 0], polyp_sample.gt_mask)

    def test_deterministic_bytes(self, tmp_path, polyp_sample):
        pred = np.clip(polyp_sample.gt_mask + 0.1, 0, 1)
        paths = []
        for i in range(2):
            grid = render_grid(polyp_sample.image, polyp_sample.gt_mask, pred)
            p = tmp_path / f"g{i}.png"
            save_image(grid, p)
            paths.append(p.read_bytes())
        assert paths[0] == paths[1]

    def test_pred_boundary_drawn_over_gt(self, polyp_sample):
        # identical masks: green wins by draw order
        h, w = polyp_sample.image.shape[:2]
        grid = render_grid(polyp_sample.image, polyp_sample.gt_mask,
                           polyp_sample.gt_mask.astype(float))
        overlay = grid[:, 3 * (w + GRID_PAD):]
        green = (overlay == (0.0, 1.0, 0.0)).all(axis=2)
        red = (overlay == (1.0, 0.0, 0.0)).all(axis=2)
        assert green.any() and not red.any()

    def test_shape_mismatch_rejected(self, polyp_sample):
        with pytest.raises(ValueError):
            render_grid(polyp_sample.image, polyp_sample.gt_mask[:32], polyp_sample.gt_mask.astype(float))


class TestMetricBars:
    def test_chart_written(self, tmp_path):
        rows = [ReportRow(arch=a, iou=0.6, dice=0.7, precision=0.7, recall=0.8, f1=0.75,
                          psnr=7.0, ssim=0.49, n_samples=5) for a in ("unet", "fpn")]
        path = render_metric_bars(rows, ["iou", "dice", "f1"], tmp_path / "bars.png")
        assert path.exists() and path.stat().st_size > 0

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            render_metric_bars([], ["iou"], tmp_path / "x.png")


class TestConfig:
    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.architectures == ["unet", "pspnet", "fpn", "linknet", "manet"]

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            config_from_dict({"bogus": 1})

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            config_from_dict({"dataset": {"bogus": 1}})

    def test_unknown_architecture(self):
        with pytest.raises(ConfigError, match="segformer"):
            config_from_dict({"architectures": ["segformer"]})

    def test_yaml_roundtrip(self, tmp_path):
        doc = {"root": "myrun", "seed": 3,
               "dataset": {"n_polyps": 6, "n_nonpolyps": 2, "image_size": [64, 96]},
               "training": {"epochs": 2, "loss_weights": {"w_dice": 2.0}}}
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(doc))
        cfg = load_config(path)
        assert cfg.root == "myrun" and cfg.dataset.image_size == (64, 96)
        assert cfg.training.epochs == 2 and cfg.training.loss_weights.w_dice == 2.0

    def test_model_overrides(self):
        cfg = config_from_dict({"model_overrides": {"fpn": {"seed": 99}}})
        assert cfg.model_config_for("fpn").seed == 99
        assert cfg.model_config_for("unet").seed == cfg.model.seed
        with pytest.raises(ConfigError):
            config_from_dict({"model_overrides": {"fpn": {"bogus": 1}}}).model_config_for("fpn")


def tiny_config(root, seed=11):
    cfg = CliConfig(root=str(root), seed=seed)
    cfg.dataset.n_polyps = 6
    cfg.dataset.n_nonpolyps = 2
    cfg.architectures = ["linknet"]
    cfg.training.epochs = 2
    cfg.detector.train.epochs = 10
    return cfg


def output_digests(root):
    root = Path(root)
    out = {}
    for pat in ("manifest.json", "results/detections/*.txt", "SAM-Results/*.png", "results/metrics.csv"):
        for p in sorted(root.glob(pat)):
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    for p in sorted(root.glob("results/checkpoints/*/*.json")):
        out[str(p.relative_to(root))] = json.loads(p.read_text())["param_hash"]
    return out


class TestPipeline:
    def test_full_run_and_determinism(self, tmp_path):
        from polyseg.pipeline import run_pipeline
        digests = []
        for name in ("a", "b"):
            cfg = tiny_config(tmp_path / name)
            assert run_pipeline(cfg) == 0
            digests.append(output_digests(tmp_path / name))
        assert digests[0] == digests[1]
        summary = json.loads((tmp_path / "a" / "results" / "run_summary.json").read_text())
        assert [s["stage"] for s in summary["stages"]] == [
            "generate", "detect", "masks", "train", "evaluate", "visualize"]
        assert all(s["status"] == "ok" for s in summary["stages"])
        assert (tmp_path / "a" / "results" / "metrics.csv").exists()
        assert list((tmp_path / "a" / "results" / "grids").glob("*.png"))

    def test_stage_isolation_masks_then_train(self, tmp_path):
        # re-running train on a root where masks already ran reproduces the
        # all-in-one invocation's checkpoints byte-for-byte (metadata hashes)
        from polyseg.pipeline import run_pipeline, run_stage
        cfg_a = tiny_config(tmp_path / "whole")
        assert run_pipeline(cfg_a) == 0
        cfg_b = tiny_config(tmp_path / "staged")
        for stage in ("generate", "detect", "masks", "train"):
            run_stage(stage, cfg_b)
        hash_a = json.loads((tmp_path / "whole" / "results" / "checkpoints" / "linknet" / "linknet.pt.json").read_text())["param_hash"]
        hash_b = json.loads((tmp_path / "staged" / "results" / "checkpoints" / "linknet" / "linknet.pt.json").read_text())["param_hash"]
        assert hash_a == hash_b

    def test_stage_failure_exit_code(self, tmp_path):
        from polyseg.pipeline import run_stage, StageError
        cfg = tiny_config(tmp_path / "empty")
        with pytest.raises(StageError, match="detect"):
            run_stage("detect", cfg)  # no manifest yet


class TestCli:
    def test_config_error_exit_1(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("bogus_key: 1\n")
        assert main(["pipeline", "--config", str(bad)]) == 1

    def test_stage_failure_exit_2(self, tmp_path):
        assert main(["evaluate", "--root", str(tmp_path / "nothing")]) == 2

    def test_generate_stage_exit_0(self, tmp_path):
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(yaml.safe_dump({"root": str(tmp_path / "run"),
                                       "dataset": {"n_polyps": 3, "n_nonpolyps": 1}}))
        assert main(["generate", "--config", str(cfg)]) == 0
        assert (tmp_path / "run" / "manifest.json").exists()

    def test_seed_override(self, tmp_path):
        assert main(["generate", "--root", str(tmp_path / "r1"), "--seed", "5"]) == 0
        manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
        assert manifest["seed"] == 5

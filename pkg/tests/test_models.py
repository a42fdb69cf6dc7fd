import numpy as np
import pytest
import torch

from polyseg.models import (
    ArchitectureKind, Encoder, ModelConfig, PSP_BINS, build_model, encode, load_encoder_weights,
)

ALL_KINDS = list(ArchitectureKind)


def rand_input(n=1, hw=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, hw, hw, generator=g)


class TestBuild:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_all_kinds_build(self, kind):
        model = build_model(ModelConfig(arch=kind))
        assert model.kind == kind
        assert model.parameter_count() > 0

    def test_seeded_init_reproducible(self):
        a = build_model(ModelConfig(arch="unet", seed=11))
        b = build_model(ModelConfig(arch="unet", seed=11))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_parameters_not_shapes(self):
        a = build_model(ModelConfig(arch="fpn", seed=1))
        b = build_model(ModelConfig(arch="fpn", seed=2))
        same = all(torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))
        assert not same
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.shape == pb.shape

    def test_unet_heavier_than_linknet(self):
        cfg = dict(encoder_channels=[16, 32, 64, 128, 256])
        unet = build_model(ModelConfig(arch="unet", **cfg))
        linknet = build_model(ModelConfig(arch="linknet", **cfg))
        assert unet.parameter_count() > linknet.parameter_count()

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(encoder_channels=[16, 32, 64])
        with pytest.raises(ValueError):
            ModelConfig(encoder_channels=[16, 32, 64, 128, 0])
        with pytest.raises(ValueError):
            ModelConfig(input_size=(60, 64))


class TestForward:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("hw", [64, 96])
    def test_shape_and_range(self, kind, hw):
        model = build_model(ModelConfig(arch=kind))
        model.eval()
        with torch.no_grad():
            y = model(rand_input(2, hw))
        assert y.shape == (2, 1, hw, hw)
        assert (y > 0).all() and (y < 1).all()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_all_zero_input_finite(self, kind):
        model = build_model(ModelConfig(arch=kind))
        model.eval()
        with torch.no_grad():
            y = model(torch.zeros(1, 3, 64, 64))
        assert torch.isfinite(y).all()
        assert (y > 0).all() and (y < 1).all()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_inference_bitwise_deterministic(self, kind):
        model = build_model(ModelConfig(arch=kind))
        model.eval()
        x = rand_input()
        with torch.no_grad():
            a, b = model(x), model(x)
        assert torch.equal(a, b)

    def test_bad_dims_rejected(self):
        model = build_model(ModelConfig())
        with pytest.raises(ValueError):
            model(torch.zeros(1, 3, 60, 64))

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_gradient_reaches_every_parameter(self, kind):
        model = build_model(ModelConfig(arch=kind))
        model.train()
        model(rand_input(1, 64, seed=4)).mean().backward()
        for name, p in model.named_parameters():
            assert p.grad is not None and p.grad.abs().sum() > 0, f"dead parameter {name}"


class TestEncoder:
    def test_feature_strides_and_channels(self):
        channels = [16, 32, 64, 128, 256]
        enc = Encoder(channels)
        feats = encode(enc, torch.rand(1, 3, 64, 64))
        for f, stride, c in zip(feats, (2, 4, 8, 16, 32), channels):
            assert f.shape == (1, c, 64 // stride, 64 // stride)

    def test_custom_channels(self):
        channels = [8, 16, 24, 48, 96]
        feats = encode(Encoder(channels), torch.rand(1, 3, 96, 64))
        assert [f.shape[1] for f in feats] == channels

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            encode(Encoder([16, 32, 64, 128, 256]), torch.rand(1, 3, 50, 64))


class TestStructuralDistinguishers:
    def test_unet_concat_skips(self):
        assert build_model(ModelConfig(arch="unet")).structure()["skip_mode"] == "concat"

    def test_linknet_additive_skips(self):
        assert build_model(ModelConfig(arch="linknet")).structure()["skip_mode"] == "add"

    def test_pspnet_pyramid_bins(self):
        model = build_model(ModelConfig(arch="pspnet"))
        assert model.structure()["pyramid_bins"] == list(PSP_BINS) == [1, 2, 3, 6]
        assert len(model.psp.branches) == 4

    def test_fpn_lateral_merge(self):
        model = build_model(ModelConfig(arch="fpn"))
        s = model.structure()
        assert s["lateral_merge"] == "add"
        assert s["levels_aggregated"] == 4
        # laterals are 1x1 projections
        for lat in model.laterals:
            assert lat.kernel_size == (1, 1)

    def test_manet_multiplicative_gates(self):
        model = build_model(ModelConfig(arch="manet"))
        assert model.structure()["gate_mode"] == "multiplicative"
        model.eval()
        with torch.no_grad():
            model(rand_input())
        for gate in model.gates:
            cg, sg = gate.last_channel_gate, gate.last_spatial_gate
            assert cg is not None and (cg > 0).all() and (cg < 1).all()
            assert sg is not None and (sg > 0).all() and (sg < 1).all()


class TestEncoderWeights:
    def test_load_replaces_encoder_only(self, tmp_path):
        src = build_model(ModelConfig(arch="unet", seed=1))
        dst = build_model(ModelConfig(arch="unet", seed=2))
        path = tmp_path / "encoder.pt"
        torch.save(src.encoder.state_dict(), path)
        decoder_before = [p.detach().clone() for p in dst.decoder_blocks.parameters()]
        load_encoder_weights(dst, path)
        for (k, a), b in zip(dst.encoder.state_dict().items(), src.encoder.state_dict().values()):
            assert torch.equal(a, b), k
        for before, after in zip(decoder_before, dst.decoder_blocks.parameters()):
            assert torch.equal(before, after)

    def test_shape_mismatch_names_tensor(self, tmp_path):
        src = build_model(ModelConfig(arch="unet", encoder_channels=[8, 16, 32, 64, 128]))
        dst = build_model(ModelConfig(arch="unet"))
        path = tmp_path / "encoder.pt"
        torch.save(src.encoder.state_dict(), path)
        with pytest.raises(ValueError, match="shape mismatch for encoder tensor"):
            load_encoder_weights(dst, path)

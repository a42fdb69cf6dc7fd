"""Five encoder-decoder segmentation architectures over a shared multi-scale
convolutional encoder: U-Net, PSPNet, FPN, LinkNet, MANet.

All models map an N x 3 x H x W batch (H, W divisible by 32) to an
N x 1 x H x W probability map. The encoder mirrors a 5-level residual layout
(stem + 4 stages, strides 2/4/8/16/32); PSPNet swaps the last two stages to
stride-1 dilated convolutions so its pyramid pooling operates at stride 8,
matching the dilated-backbone convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ArchitectureKind(str, Enum):
    UNET = "unet"
    PSPNET = "pspnet"
    FPN = "fpn"
    LINKNET = "linknet"
    MANET = "manet"


DESK_CHANNELS = [16, 32, 64, 128, 256]
FULL_CHANNELS = [64, 64, 128, 256, 512]


@dataclass
class ModelConfig:
    arch: ArchitectureKind = ArchitectureKind.UNET
    encoder_channels: list[int] = field(default_factory=lambda: list(DESK_CHANNELS))
    decoder_channels: list[int] = field(default_factory=lambda: [128, 64, 32, 16])
    blocks_per_stage: int = 2
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0
    pretrained_encoder_path: str | None = None

    def __post_init__(self):
        if isinstance(self.arch, str):
            self.arch = ArchitectureKind(self.arch)
        if len(self.encoder_channels) != 5:
            raise ValueError("encoder_channels must list 5 widths (stem + 4 stages)")
        if any(c <= 0 for c in self.encoder_channels) or any(c <= 0 for c in self.decoder_channels):
            raise ValueError("channel widths must be positive")
        h, w = self.input_size
        if h % 32 or w % 32:
            raise ValueError(f"input size must be divisible by 32, got {h}x{w}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


class EncoderFeatures(NamedTuple):
    f2: torch.Tensor   # stride 2
    f4: torch.Tensor   # stride 4
    f8: torch.Tensor   # stride 8
    f16: torch.Tensor  # stride 16
    f32: torch.Tensor  # stride 32


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.norm1 = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.norm2 = _gn(channels)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + x)


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, blocks: int, stride: int = 2, dilation: int = 1):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
            _gn(cout), nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(cout, dilation) for _ in range(blocks)])

    def forward(self, x):
        return self.blocks(self.down(x))


class Encoder(nn.Module):
    """Stem + 4 residual stages emitting features at strides {2,4,8,16,32}.

    dilated_tail replaces the strides of the last two stages with dilation
    (output stride 8); the feature list then repeats the stride-8 resolution.
    """

    def __init__(self, channels: list[int], blocks_per_stage: int = 2, dilated_tail: bool = False):
        super().__init__()
        c0, c1, c2, c3, c4 = channels
        self.channels = list(channels)
        self.dilated_tail = dilated_tail
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, stride=2, padding=1), _gn(c0), nn.ReLU(inplace=True))
        self.stage1 = EncoderStage(c0, c1, blocks_per_stage)
        self.stage2 = EncoderStage(c1, c2, blocks_per_stage)
        if dilated_tail:
            self.stage3 = EncoderStage(c2, c3, blocks_per_stage, stride=1, dilation=2)
            self.stage4 = EncoderStage(c3, c4, blocks_per_stage, stride=1, dilation=4)
        else:
            self.stage3 = EncoderStage(c2, c3, blocks_per_stage)
            self.stage4 = EncoderStage(c3, c4, blocks_per_stage)

    def forward(self, x) -> EncoderFeatures:
        f2 = self.stem(x)
        f4 = self.stage1(f2)
        f8 = self.stage2(f4)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return EncoderFeatures(f2, f4, f8, f16, f32)


def encode(encoder: Encoder, image: torch.Tensor) -> EncoderFeatures:
    """Run the encoder on an N x 3 x H x W batch (dims divisible by 32)."""
    _check_dims(image)
    return encoder(image)


def _check_dims(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"spatial dims must be divisible by 32, got {h}x{w}")


def _upsample(x, factor=2):
    return F.interpolate(x, scale_factor=factor, mode="nearest")


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.op = nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), _gn(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.op(x)


OUTPUT_EPS = 1e-7


class SegmentationModel(nn.Module):
    """Common surface: probability output, structural summary, encoder access."""

    kind: ArchitectureKind

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

    def forward(self, x):
        _check_dims(x)
        logits = self._logits(x)
        return torch.sigmoid(logits).clamp(OUTPUT_EPS, 1.0 - OUTPUT_EPS)

    def _logits(self, x):
        raise NotImplementedError

    def structure(self) -> dict:
        """Inspection hook describing the decoder mechanism."""
        raise NotImplementedError

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


class UNetModel(SegmentationModel):
    """Concatenative skip connections at every decoder resolution."""

    kind = ArchitectureKind.UNET

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        enc = config.encoder_channels
        dec = config.decoder_channels
        self.encoder = Encoder(enc, config.blocks_per_stage)
        skips = [enc[3], enc[2], enc[1], enc[0]]
        self.decoder_blocks = nn.ModuleList()
        cin = enc[4]
        for skip_c, out_c in zip(skips, dec):
            self.decoder_blocks.append(ConvBlock(cin + skip_c, out_c))
            cin = out_c
        self.final = nn.Sequential(ConvBlock(cin, cin), nn.Conv2d(cin, 1, 1))

    def _logits(self, x):
        f = self.encoder(x)
        skips = [f.f16, f.f8, f.f4, f.f2]
        y = f.f32
        for block, skip in zip(self.decoder_blocks, skips):
            y = block(torch.cat([_upsample(y), skip], dim=1))
        return self.final[1](self.final[0](_upsample(y)))

    def structure(self):
        return {"skip_mode": "concat", "decoder_blocks": len(self.decoder_blocks)}


class LinkNetModel(SegmentationModel):
    """Additive skip connections; decoder widths are pinned to the encoder's."""

    kind = ArchitectureKind.LINKNET

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        enc = config.encoder_channels
        self.encoder = Encoder(enc, config.blocks_per_stage)
        self.decoder_blocks = nn.ModuleList(
            ConvBlock(enc[i + 1], enc[i]) for i in reversed(range(4))
        )
        self.final = nn.Conv2d(enc[0], 1, 1)

    def _logits(self, x):
        f = self.encoder(x)
        skips = [f.f16, f.f8, f.f4, f.f2]
        y = f.f32
        for block, skip in zip(self.decoder_blocks, skips):
            y = block(_upsample(y)) + skip
        return self.final(_upsample(y))

    def structure(self):
        return {"skip_mode": "add", "decoder_blocks": len(self.decoder_blocks)}


PSP_BINS = (1, 2, 3, 6)


class PSPModule(nn.Module):
    def __init__(self, cin: int, branch_c: int, bins=PSP_BINS):
        super().__init__()
        self.bins = tuple(bins)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(cin, branch_c, 1), _gn(branch_c), nn.ReLU(inplace=True))
            for b in self.bins
        )
        self.fuse = ConvBlock(cin + branch_c * len(self.bins), cin)

    def forward(self, x):
        size = x.shape[-2:]
        pooled = [F.interpolate(br(x), size=size, mode="nearest") for br in self.branches]
        return self.fuse(torch.cat([x, *pooled], dim=1))


class PSPNetModel(SegmentationModel):
    """Pyramid pooling at bins {1,2,3,6} over stride-8 features (dilated tail)."""

    kind = ArchitectureKind.PSPNET

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        enc = config.encoder_channels
        self.encoder = Encoder(enc, config.blocks_per_stage, dilated_tail=True)
        self.psp = PSPModule(enc[4], max(enc[4] // 4, 8))
        dec = config.decoder_channels[:3] if len(config.decoder_channels) >= 3 else [64, 32, 16]
        self.decoder_blocks = nn.ModuleList()
        cin = enc[4]
        for out_c in dec:
            self.decoder_blocks.append(ConvBlock(cin, out_c))
            cin = out_c
        self.final = nn.Conv2d(cin, 1, 1)

    def _logits(self, x):
        y = self.psp(self.encoder(x).f32)  # stride 8 spatially (dilated tail)
        for block in self.decoder_blocks:
            y = block(_upsample(y))
        return self.final(y)

    def structure(self):
        return {"pyramid_bins": list(self.psp.bins), "output_stride": 8}


class FPNModel(SegmentationModel):
    """Top-down pyramid with 1x1 lateral projections; the head sums the
    per-level predictions upsampled to stride 4."""

    kind = ArchitectureKind.FPN
    LATERAL_CHANNELS = 64

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        enc = config.encoder_channels
        self.encoder = Encoder(enc, config.blocks_per_stage)
        lc = self.LATERAL_CHANNELS
        self.laterals = nn.ModuleList(nn.Conv2d(c, lc, 1) for c in [enc[1], enc[2], enc[3], enc[4]])
        self.smooth = nn.ModuleList(ConvBlock(lc, lc) for _ in range(4))
        self.heads = nn.ModuleList(ConvBlock(lc, lc) for _ in range(4))
        self.final = nn.Sequential(ConvBlock(lc, lc // 2), nn.Conv2d(lc // 2, 1, 1))

    def _logits(self, x):
        f = self.encoder(x)
        feats = [f.f4, f.f8, f.f16, f.f32]
        laterals = [lat(ft) for lat, ft in zip(self.laterals, feats)]
        pyramid = [None] * 4
        pyramid[3] = laterals[3]
        for i in (2, 1, 0):
            pyramid[i] = laterals[i] + _upsample(pyramid[i + 1])
        pyramid = [sm(p) for sm, p in zip(self.smooth, pyramid)]
        target = pyramid[0].shape[-2:]
        merged = sum(
            F.interpolate(head(p), size=target, mode="nearest")
            for head, p in zip(self.heads, pyramid)
        )
        y = self.final[0](_upsample(merged))
        return self.final[1](_upsample(y))

    def structure(self):
        return {"lateral_merge": "add", "lateral_channels": self.LATERAL_CHANNELS,
                "levels_aggregated": len(self.heads)}


class AttentionGate(nn.Module):
    """Channel gate (pooled bottleneck -> logistic) and spatial gate, both
    multiplicative. Exposes the last gate maps for structural inspection."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(channels // 4, 4)
        self.channel_fc = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(inplace=True),
                                        nn.Conv2d(hidden, channels, 1))
        self.spatial_conv = nn.Conv2d(channels, 1, 7, padding=3)
        self.last_channel_gate: torch.Tensor | None = None
        self.last_spatial_gate: torch.Tensor | None = None

    def forward(self, x):
        cg = torch.sigmoid(self.channel_fc(F.adaptive_avg_pool2d(x, 1)))
        x = x * cg
        sg = torch.sigmoid(self.spatial_conv(x))
        self.last_channel_gate = cg.detach()
        self.last_spatial_gate = sg.detach()
        return x * sg


class MANetModel(SegmentationModel):
    """U-Net style concatenative decoder with a multiplicative attention gate
    after every decoder block."""

    kind = ArchitectureKind.MANET

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        enc = config.encoder_channels
        dec = config.decoder_channels
        self.encoder = Encoder(enc, config.blocks_per_stage)
        skips = [enc[3], enc[2], enc[1], enc[0]]
        self.decoder_blocks = nn.ModuleList()
        self.gates = nn.ModuleList()
        cin = enc[4]
        for skip_c, out_c in zip(skips, dec):
            self.decoder_blocks.append(ConvBlock(cin + skip_c, out_c))
            self.gates.append(AttentionGate(out_c))
            cin = out_c
        self.final = nn.Sequential(ConvBlock(cin, cin), nn.Conv2d(cin, 1, 1))

    def _logits(self, x):
        f = self.encoder(x)
        skips = [f.f16, f.f8, f.f4, f.f2]
        y = f.f32
        for block, gate, skip in zip(self.decoder_blocks, self.gates, skips):
            y = gate(block(torch.cat([_upsample(y), skip], dim=1)))
        return self.final[1](self.final[0](_upsample(y)))

    def structure(self):
        return {"skip_mode": "concat", "attention_gates": len(self.gates), "gate_mode": "multiplicative"}


_ARCHS = {
    ArchitectureKind.UNET: UNetModel,
    ArchitectureKind.PSPNET: PSPNetModel,
    ArchitectureKind.FPN: FPNModel,
    ArchitectureKind.LINKNET: LinkNetModel,
    ArchitectureKind.MANET: MANetModel,
}


def build_model(config: ModelConfig) -> SegmentationModel:
    """Construct a model with parameter initialization keyed by config.seed."""
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        model = _ARCHS[config.arch](config)
    if config.pretrained_encoder_path:
        load_encoder_weights(model, config.pretrained_encoder_path)
    return model


def load_encoder_weights(model: SegmentationModel, path) -> SegmentationModel:
    """Replace encoder parameters from a saved state dict; decoder untouched."""
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = model.encoder.state_dict()
    for key, tensor in state.items():
        if key not in own:
            raise ValueError(f"encoder weight file has unknown tensor {key!r}")
        if own[key].shape != tensor.shape:
            raise ValueError(
                f"shape mismatch for encoder tensor {key!r}: "
                f"expected {tuple(own[key].shape)}, got {tuple(tensor.shape)}"
            )
    model.encoder.load_state_dict(state)
    return model

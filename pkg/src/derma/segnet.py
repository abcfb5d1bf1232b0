"""Deep-UNet: stride-2 backbone, ASPP bottleneck, attention-gated skips, deep supervision."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn

from .layers import (
    Activation,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    DepthwiseSeparableConv,
    activation,
    bilinear_upsample,
    conv_bn_relu,
    dsc_bn_relu,
)

Tensor = torch.Tensor


@dataclass
class SegConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: tuple[int, ...] = (48, 24, 16)
    aspp_rates: tuple[int, ...] = (1, 2, 3)
    aspp_branch_channels: int = 32
    aspp_out_channels: int = 64
    attention_channels: int = 8
    input_side: int = 64
    in_channels: int = 3

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if len(self.stage_channels) != len(self.decoder_channels):
            raise ValueError("backbone and decoder must have the same number of stages")
        if len(self.stage_channels) < 3:
            raise ValueError("at least 3 stages are needed for two intermediate supervision heads")
        if len(set(self.aspp_rates)) != len(self.aspp_rates) or min(self.aspp_rates) < 1:
            raise ValueError("ASPP dilation rates must be distinct and >= 1")
        if self.input_side % self.stride:
            raise ValueError(f"input side {self.input_side} is not divisible by {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.stage_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls) -> "SegConfig":
        """Five stages at 224 px, roughly EfficientNet-B3 widths."""
        return cls(stage_channels=(24, 32, 48, 136, 384), decoder_channels=(256, 128, 64, 32, 16),
                   aspp_branch_channels=128, aspp_out_channels=256, attention_channels=32, input_side=224)


class SegOutput(NamedTuple):
    final: Tensor
    aux1: Tensor | None = None
    aux2: Tensor | None = None


class Backbone(nn.Module):
    """Plain conv stand-in for a pretrained encoder: each stage halves the side."""

    def __init__(self, in_ch: int, stage_channels: tuple[int, ...]):
        super().__init__()
        stages = []
        for out_ch in stage_channels:
            stages.append(nn.Sequential(conv_bn_relu(in_ch, out_ch, stride=2), conv_bn_relu(out_ch, out_ch)))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)

    def forward(self, x: Tensor) -> list[Tensor]:
        n = len(self.stages)
        if x.shape[-1] % 2**n or x.shape[-2] % 2**n:
            raise ValueError(f"input side {tuple(x.shape[-2:])} must be divisible by {2 ** n}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def receptive_field(kernel: int, dilation: int) -> int:
    return dilation * (kernel - 1) + 1


class ASPP(nn.Module):
    def __init__(self, in_ch: int, rates: tuple[int, ...], branch_ch: int, out_ch: int):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            [conv_bn_relu(in_ch, branch_ch, kernel=1)]
            + [conv_bn_relu(in_ch, branch_ch, kernel=3, dilation=r) for r in self.rates]
        )
        self.fuse = Conv2d(branch_ch * len(self.branches), out_ch, kernel=1)
        self.fuse_bn = BatchNorm(out_ch)
        self.fuse_act = Activation("relu")

    def forward(self, x: Tensor) -> Tensor:
        need = receptive_field(3, max(self.rates))
        if min(x.shape[-2:]) < need:
            raise ValueError(
                f"ASPP input side {tuple(x.shape[-2:])} is smaller than the {need}-pixel receptive "
                f"field of dilation {max(self.rates)}; use a larger input or fewer stages"
            )
        y = torch.cat([b(x) for b in self.branches], dim=1)
        return self.fuse_act(self.fuse_bn(self.fuse(y)))


class DAG(nn.Module):
    """Depthwise attention gate on a skip connection.

    A single-channel sigmoid mask, computed from the encoder features and the
    upsampled decoder features, gates a depthwise-separable refinement of the
    encoder features.
    """

    def __init__(self, enc_ch: int, dec_ch: int, att_ch: int):
        super().__init__()
        self.dsc = DepthwiseSeparableConv(enc_ch, enc_ch)
        self.attention = nn.Sequential(
            Conv2d(enc_ch + dec_ch, att_ch, kernel=1), BatchNorm(att_ch), Activation("relu"),
            Conv2d(att_ch, 1, kernel=1),
        )
        self.bypass = False

    def mask(self, enc: Tensor, dec: Tensor) -> Tensor:
        return activation(self.attention(torch.cat([enc, dec], dim=1)), "sigmoid")

    def forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        if enc.shape[-2:] != dec.shape[-2:]:
            raise ValueError(f"skip {tuple(enc.shape[-2:])} and decoder {tuple(dec.shape[-2:])} extents differ")
        refined = self.dsc(enc)
        if self.bypass:
            return refined
        return refined * self.mask(enc, dec)


class DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, att_ch: int):
        super().__init__()
        self.up = ConvTranspose2d(in_ch, out_ch, kernel=2, stride=2)
        self.dag = DAG(skip_ch, out_ch, att_ch) if skip_ch else None
        self.double_conv = nn.Sequential(dsc_bn_relu(out_ch + skip_ch, out_ch), dsc_bn_relu(out_ch, out_ch))

    def forward(self, x: Tensor, skip: Tensor | None = None) -> Tensor:
        up = self.up(x)
        if skip is not None:
            if self.dag is None:
                raise ValueError("this stage was built without a skip connection")
            if up.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"upsampled {tuple(up.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
            up = torch.cat([self.dag(skip, up), up], dim=1)
        return self.double_conv(up)


class DeepUNet(nn.Module):
    def __init__(self, config: SegConfig | None = None):
        super().__init__()
        self.config = cfg = config or SegConfig()
        self.backbone = Backbone(cfg.in_channels, cfg.stage_channels)
        self.aspp = ASPP(cfg.stage_channels[-1], cfg.aspp_rates, cfg.aspp_branch_channels, cfg.aspp_out_channels)
        skips = list(reversed(cfg.stage_channels[:-1])) + [0]  # last stage has no skip at full resolution
        in_ch = cfg.aspp_out_channels
        stages = []
        for skip_ch, out_ch in zip(skips, cfg.decoder_channels):
            stages.append(DecoderStage(in_ch, skip_ch, out_ch, cfg.attention_channels))
            in_ch = out_ch
        self.decoder = nn.ModuleList(stages)
        # aux2 sits at the deepest decoder stage, aux1 one stage shallower
        self.aux2_head = Conv2d(cfg.decoder_channels[0], 1, kernel=1)
        self.aux1_head = Conv2d(cfg.decoder_channels[1], 1, kernel=1)
        self.head = Conv2d(cfg.decoder_channels[-1], 1, kernel=1)

    def set_dag_bypass(self, bypass: bool) -> None:
        for stage in self.decoder:
            if stage.dag is not None:
                stage.dag.bypass = bypass

    def forward(self, x: Tensor) -> SegOutput:
        feats = self.backbone(x)
        d = self.aspp(feats[-1])
        skips = list(reversed(feats[:-1])) + [None]
        levels = []
        for stage, skip in zip(self.decoder, skips):
            d = stage(d, skip)
            levels.append(d)
        final = self.head(d)
        if not self.training:
            return SegOutput(final)
        hw = tuple(x.shape[-2:])
        aux1 = bilinear_upsample(self.aux1_head(levels[1]), hw)
        aux2 = bilinear_upsample(self.aux2_head(levels[0]), hw)
        return SegOutput(final, aux1, aux2)

    @torch.no_grad()
    def predict_mask(self, x: Tensor, threshold: float = 0.5) -> Tensor:
        was = self.training
        self.eval()
        try:
            return (torch.sigmoid(self(x).final) >= threshold).to(x.dtype)
        finally:
            self.train(was)

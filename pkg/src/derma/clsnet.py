"""Transformer dual-branch classifier: two token encoders, cross-attention, metadata fusion."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .layers import (
    Activation,
    BatchNorm,
    LayerNorm,
    Linear,
    conv_bn_relu,
    global_avg_pool,
    linear_bn_relu_dropout,
    softmax,
)

Tensor = torch.Tensor

MODES = ("dual_meta", "dual", "original", "segmented")


@dataclass
class ClsConfig:
    channels: int = 128
    grid_side: int = 8
    heads: int = 4
    ffn_factor: int = 2
    encoder_channels: tuple[int, ...] = (16, 32)
    tab_in_dim: int = 19
    tab_hidden: tuple[int, int] = (64, 128)
    head_dims: tuple[int, ...] = (512, 128)
    n_classes: int = 3
    dropout: float = 0.3
    input_side: int = 64

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.tab_hidden = tuple(int(c) for c in self.tab_hidden)
        self.head_dims = tuple(int(c) for c in self.head_dims)
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by {self.heads} heads")
        stride = 2 ** (len(self.encoder_channels) + 1)
        if self.input_side != self.grid_side * stride:
            raise ValueError(f"input side {self.input_side} with {len(self.encoder_channels) + 1} stride-2 "
                             f"stages gives a grid of {self.input_side / stride}, expected {self.grid_side}")

    @property
    def tokens(self) -> int:
        return self.grid_side**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, n_classes: int = 7, tab_in_dim: int = 19) -> "ClsConfig":
        """1920-channel tokens on a 7x7 grid from 224 px inputs."""
        return cls(channels=1920, grid_side=7, heads=8, encoder_channels=(64, 128, 256, 512),
                   tab_in_dim=tab_in_dim, n_classes=n_classes, input_side=224)


class TokenEncoder(nn.Module):
    """Conv stack whose last feature map is flattened row-major into tokens."""

    def __init__(self, config: ClsConfig, in_ch: int = 3):
        super().__init__()
        self.config = config
        stages = []
        for out_ch in config.encoder_channels + (config.channels,):
            stages.append(nn.Sequential(conv_bn_relu(in_ch, out_ch, stride=2), conv_bn_relu(out_ch, out_ch)))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)

    def feature_map(self, x: Tensor) -> Tensor:
        side = self.config.input_side
        if x.ndim != 4 or tuple(x.shape[-2:]) != (side, side):
            raise ValueError(f"encoder expects (B, 3, {side}, {side}), got {tuple(x.shape)}")
        return self.stages(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.feature_map(x).flatten(2).transpose(1, 2)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v over the last two dims; returns (output, weights)."""
    weights = softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), axis=-1)
    return weights @ v, weights


class MultiHeadCrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads, self.head_dim = heads, dim // heads
        self.q_proj = Linear(dim, dim, init="xavier")
        self.k_proj = Linear(dim, dim, init="xavier")
        self.v_proj = Linear(dim, dim, init="xavier")
        self.out_proj = Linear(dim, dim, init="xavier")

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, return_weights: bool = False):
        if not (query.shape[1] == key.shape[1] == value.shape[1]):
            raise ValueError(f"token counts differ: Q {query.shape[1]}, K {key.shape[1]}, V {value.shape[1]}")
        out, weights = scaled_dot_product_attention(
            self._split(self.q_proj(query)), self._split(self.k_proj(key)), self._split(self.v_proj(value))
        )
        b, _, t, _ = out.shape
        out = self.out_proj(out.transpose(1, 2).reshape(b, t, self.heads * self.head_dim))
        return (out, weights) if return_weights else out


class CrossFusionBlock(nn.Module):
    """Attention with residual + LayerNorm, FFN with residual + LayerNorm, pooled and projected."""

    def __init__(self, config: ClsConfig):
        super().__init__()
        c = config.channels
        self.attention = MultiHeadCrossAttention(c, config.heads)
        self.norm1 = LayerNorm(c)
        self.ffn = nn.Sequential(Linear(c, c * config.ffn_factor), Activation("relu"),
                                 Linear(c * config.ffn_factor, c))
        self.norm2 = LayerNorm(c)
        self.projection = linear_bn_relu_dropout(c, c, config.dropout)

    def tokens(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        z = self.norm1(q + self.attention(q, k, v))
        return self.norm2(z + self.ffn(z))

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return self.projection(global_avg_pool(self.tokens(q, k, v)))


class TabularNet(nn.Module):
    """E_t = BN(ReLU(W2 BN(ReLU(W1 x_t))))."""

    def __init__(self, in_dim: int, hidden: tuple[int, int]):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(
            Linear(in_dim, hidden[0]), Activation("relu"), BatchNorm(hidden[0]),
            Linear(hidden[0], hidden[1]), Activation("relu"), BatchNorm(hidden[1]),
        )

    def forward(self, x: Tensor, alpha: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"metadata must be (B, {self.in_dim}), got {tuple(x.shape)}")
        return alpha.view(-1, 1) * self.net(x)


def fuse(f_vision: Tensor, f_tabular: Tensor, alpha: Tensor) -> Tensor:
    if f_vision.shape != f_tabular.shape:
        raise ValueError(f"vision {tuple(f_vision.shape)} and tabular {tuple(f_tabular.shape)} dims differ")
    alpha = torch.as_tensor(alpha, dtype=f_vision.dtype)
    if alpha.ndim == 1:
        alpha = alpha.view(-1, 1)
    return f_vision + alpha * f_tabular


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, dims: tuple[int, ...], n_classes: int, rate: float):
        super().__init__()
        self.in_dim = in_dim
        layers = []
        for d in dims:
            layers.append(linear_bn_relu_dropout(in_dim, d, rate))
            in_dim = d
        layers.append(Linear(in_dim, n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim} features, got {f.shape[-1]}")
        return self.net(f)


class TDBN(nn.Module):
    """Dual-branch classifier. Logits only; softmax is applied by callers at prediction time.

    With ``use_metadata=False`` every sample's availability flag is forced to 0,
    which reduces the fused feature to the vision feature.
    """

    def __init__(self, config: ClsConfig | None = None, use_metadata: bool = True):
        super().__init__()
        self.config = cfg = config or ClsConfig()
        self.use_metadata = use_metadata
        self.default_cam_layer = f"encoder_orig.stages.{len(cfg.encoder_channels)}"
        self.encoder_orig = TokenEncoder(cfg)
        self.encoder_seg = TokenEncoder(cfg)
        self.fusion = CrossFusionBlock(cfg)
        self.tabular = TabularNet(cfg.tab_in_dim, cfg.tab_hidden)
        self.tab_projection = linear_bn_relu_dropout(cfg.tab_hidden[1], cfg.channels, cfg.dropout)
        self.head = ClassifierHead(cfg.channels, cfg.head_dims, cfg.n_classes, cfg.dropout)

    @property
    def mode(self) -> str:
        return "dual_meta" if self.use_metadata else "dual"

    def vision_features(self, original: Tensor, segmented: Tensor) -> Tensor:
        if original.shape != segmented.shape:
            raise ValueError(f"original {tuple(original.shape)} and segmented {tuple(segmented.shape)} misaligned")
        q = self.encoder_orig(original)
        k = self.encoder_seg(segmented)
        return self.fusion(q, k, q)

    def forward(self, original: Tensor, segmented: Tensor, metadata: Tensor | None = None,
                alpha: Tensor | None = None) -> Tensor:
        f = self.vision_features(original, segmented)
        if metadata is None:
            return self.head(f)
        if metadata.shape[0] != original.shape[0]:
            raise ValueError("metadata batch does not match image batch")
        alpha = torch.ones(metadata.shape[0]) if alpha is None else torch.as_tensor(alpha)
        alpha = alpha.to(f.dtype) if self.use_metadata else torch.zeros_like(alpha, dtype=f.dtype)
        f_tab = self.tab_projection(self.tabular(metadata, alpha))
        return self.head(fuse(f, f_tab, alpha))


class SingleBranchClassifier(nn.Module):
    """One encoder on either the original or the segmented image, pooled then classified."""

    def __init__(self, config: ClsConfig | None = None, stream: str = "original"):
        super().__init__()
        if stream not in ("original", "segmented"):
            raise ValueError(f"stream must be 'original' or 'segmented', got {stream!r}")
        self.config = cfg = config or ClsConfig()
        self.stream = stream
        self.default_cam_layer = f"encoder.stages.{len(cfg.encoder_channels)}"
        self.encoder = TokenEncoder(cfg)
        self.projection = linear_bn_relu_dropout(cfg.channels, cfg.channels, cfg.dropout)
        self.head = ClassifierHead(cfg.channels, cfg.head_dims, cfg.n_classes, cfg.dropout)

    @property
    def mode(self) -> str:
        return self.stream

    def forward(self, original: Tensor, segmented: Tensor | None = None, metadata: Tensor | None = None,
                alpha: Tensor | None = None) -> Tensor:
        x = original if self.stream == "original" else segmented
        return self.head(self.projection(global_avg_pool(self.encoder(x))))


def build_classifier(config: ClsConfig, mode: str) -> nn.Module:
    if mode == "dual_meta":
        return TDBN(config, use_metadata=True)
    if mode == "dual":
        return TDBN(config, use_metadata=False)
    if mode in ("original", "segmented"):
        return SingleBranchClassifier(config, stream=mode)
    raise ValueError(f"unknown classifier mode {mode!r}; expected one of {MODES}")

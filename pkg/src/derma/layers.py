"""Differentiable building blocks shared by the segmentation and classification nets.

Functional ops validate their inputs and delegate to ``torch.nn.functional``;
the modules below own parameters and call the functional ops in ``forward``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

Tensor = torch.Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


def conv_out_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {tuple(x.shape)}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    if x.shape[1] != weight.shape[1] * groups:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1] * groups}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=groups)


def depthwise_separable_conv(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                             padding: int = 1, dilation: int = 1) -> Tensor:
    c = x.shape[1]
    if depthwise.shape[0] != c or depthwise.shape[1] != 1:
        raise ValueError(f"depthwise kernel must have shape ({c}, 1, k, k), got {tuple(depthwise.shape)}")
    if pointwise.shape[2:] != (1, 1):
        raise ValueError("pointwise kernel must be 1x1")
    y = conv2d(x, depthwise, None, padding=padding, dilation=dilation, groups=c)
    return conv2d(y, pointwise, None)


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"input channels {tuple(x.shape)} do not match transpose weight {tuple(weight.shape)}")
    return F.conv_transpose2d(x, weight, bias, stride=stride)


def batch_norm(x: Tensor, running_mean: Tensor, running_var: Tensor, weight: Tensor | None,
               bias: Tensor | None, training: bool, momentum: float = BN_MOMENTUM,
               eps: float = BN_EPS) -> Tensor:
    """Per-channel batch norm over dim 1.

    In training mode the running variance is updated with the unbiased batch
    variance: ``running = (1 - momentum) * running + momentum * batch``.
    """
    if training and x.shape[0] < 2:
        raise ValueError("batch_norm in training mode needs a batch of at least 2")
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty feature dimension")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W + b over the last dim; ``weight`` is stored (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"last dim {x.shape[-1]} does not match weight input dim {weight.shape[0]}")
    y = x @ weight
    return y if bias is None else y + bias


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = z.exp()
    return e / e.sum(dim=axis, keepdim=True)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def dropout(x: Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) or tokens (B, T, C) -> (B, C)."""
    if x.ndim == 4:
        if x.shape[2] * x.shape[3] == 0:
            raise ValueError("cannot pool an empty feature map")
        return x.mean(dim=(2, 3))
    if x.ndim == 3:
        if x.shape[1] == 0:
            raise ValueError("cannot pool an empty token sequence")
        return x.mean(dim=1)
    raise ValueError(f"global_avg_pool expects 3-D tokens or 4-D maps, got {x.ndim}-D")


def bilinear_upsample(x: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize with half-pixel centres (corners not aligned)."""
    h, w = int(target_hw[0]), int(target_hw[1])
    if h < x.shape[-2] or w < x.shape[-1]:
        raise ValueError(f"target {(h, w)} is smaller than source {tuple(x.shape[-2:])}")
    if (h, w) == tuple(x.shape[-2:]):
        return x
    return F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)


# ---------------------------------------------------------------- modules


def _kaiming(shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return torch.empty(shape).uniform_(-bound, bound)


def _xavier(fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.empty(fan_in, fan_out).uniform_(-bound, bound)


class Conv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, bias: bool = True):
        super().__init__()
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel // 2) if padding is None else padding
        self.weight = nn.Parameter(_kaiming((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class DepthwiseSeparableConv(nn.Module):
    """Per-channel k x k conv then 1x1 pointwise; no biases (a BN usually follows)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, dilation: int = 1):
        super().__init__()
        self.padding, self.dilation = dilation * (kernel // 2), dilation
        self.depthwise = nn.Parameter(_kaiming((in_ch, 1, kernel, kernel), kernel * kernel))
        self.pointwise = nn.Parameter(_kaiming((out_ch, in_ch, 1, 1), in_ch))

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_separable_conv(x, self.depthwise, self.pointwise, self.padding, self.dilation)


class ConvTranspose2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 2, stride: int = 2):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(_kaiming((in_ch, out_ch, kernel, kernel), in_ch))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return transpose_conv2d(x, self.weight, self.bias, self.stride)


class BatchNorm(nn.Module):
    """Batch norm over dim 1 for (B, C), (B, C, L) or (B, C, H, W) inputs."""

    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                          self.training, self.momentum, self.eps)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, init: str = "kaiming"):
        super().__init__()
        w = _xavier(in_dim, out_dim) if init == "xavier" else _kaiming((in_dim, out_dim), in_dim)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Activation(nn.Module):
    def __init__(self, kind: str = "relu"):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return activation(x, self.kind)


class ReluPattern:
    """Record which ReLU units are active during the latest forward pass of ``modules``.

    Use as a context manager; calling the instance returns the concatenated
    boolean pattern (empty if nothing ran).
    """

    def __init__(self, *modules: nn.Module):
        self._acts = [m for mod in modules for m in mod.modules()
                      if isinstance(m, Activation) and m.kind == "relu"]
        self._latest: dict[int, Tensor] = {}
        self._handles = []

    def __enter__(self) -> "ReluPattern":
        for i, m in enumerate(self._acts):
            self._handles.append(m.register_forward_hook(
                lambda _m, inp, _out, i=i: self._latest.__setitem__(i, (inp[0] > 0).flatten())))
        return self

    def __exit__(self, *exc) -> None:
        for h in self._handles:
            h.remove()
        self._handles.clear()

    def __call__(self) -> Tensor:
        parts = [self._latest[i] for i in sorted(self._latest)]
        return torch.cat(parts) if parts else torch.zeros(0, dtype=torch.bool)


class Dropout(nn.Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training)


def conv_bn_relu(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(Conv2d(in_ch, out_ch, kernel, stride, dilation=dilation, bias=False),
                         BatchNorm(out_ch), Activation("relu"))


def dsc_bn_relu(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(DepthwiseSeparableConv(in_ch, out_ch), BatchNorm(out_ch), Activation("relu"))


def linear_bn_relu_dropout(in_dim: int, out_dim: int, rate: float) -> nn.Sequential:
    return nn.Sequential(Linear(in_dim, out_dim), BatchNorm(out_dim), Activation("relu"), Dropout(rate))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

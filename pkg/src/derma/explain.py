"""Grad-CAM heatmaps, lesion focus scores and overlay panels."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imageio import write_image
from .layers import bilinear_upsample

# (position, RGB) stops, linearly interpolated
COLOR_RAMP = (
    (0.00, (0, 0, 0)),
    (0.25, (60, 20, 140)),
    (0.50, (200, 40, 80)),
    (0.75, (250, 150, 20)),
    (1.00, (255, 255, 210)),
)
OVERLAY_WEIGHT = 0.5


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    layer: str
    target_class: int
    raw: np.ndarray  # ReLU'd map at layer resolution, before upsampling and scaling


@dataclass
class FocusScore:
    mass_fraction: float
    iou: float


def _find_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise ValueError(f"model has no layer named {name!r}")
    return modules[name]


def grad_cam(model: nn.Module, inputs: tuple, target_class: int | None = None, layer: str | None = None) -> Heatmap:
    """Grad-CAM for a single sample.

    ``inputs`` are the positional arguments of ``model`` with batch size 1; the
    first one fixes the output extent. The model is run in eval mode and its
    parameters are left untouched. Without ``target_class`` the predicted class
    is explained.
    """
    layer = layer or getattr(model, "default_cam_layer", None)
    if layer is None:
        raise ValueError("no layer given and the model has no default_cam_layer")
    module = _find_layer(model, layer)
    captured = {}

    def hook(_mod, _inp, out):
        # frozen or parameter-free upstream layers: track gradients from here on
        if isinstance(out, torch.Tensor) and not out.requires_grad:
            out = out.detach().requires_grad_(True)
            captured["act"] = out
            return out
        captured["act"] = out

    handle = module.register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(*inputs)
            act = captured.get("act")
            if not isinstance(act, torch.Tensor) or act.ndim != 4:
                shape = None if act is None else tuple(getattr(act, "shape", ()))
                raise ValueError(f"layer {layer!r} does not produce spatial (B, C, H, W) maps (got {shape})")
            if logits.shape[0] != 1:
                raise ValueError("grad_cam explains one sample at a time")
            n_classes = logits.shape[1]
            if target_class is None:
                target_class = int(logits[0].argmax())
            if not 0 <= target_class < n_classes:
                raise ValueError(f"target class {target_class} outside [0, {n_classes})")
            (grad,) = torch.autograd.grad(logits[0, target_class], act)
    finally:
        handle.remove()
        model.train(was_training)
    weights = grad[0].mean(dim=(1, 2))
    raw = torch.relu((weights[:, None, None] * act[0]).sum(0)).detach()
    hw = tuple(inputs[0].shape[-2:])
    up = bilinear_upsample(raw[None, None], hw)[0, 0].double()
    lo, hi = float(up.min()), float(up.max())
    values = np.zeros(hw) if hi - lo <= 0.0 else ((up - lo) / (hi - lo)).numpy()
    return Heatmap(np.clip(values, 0.0, 1.0), layer, int(target_class), raw.double().numpy())


def focus_score(heatmap: Heatmap | np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> FocusScore:
    h = np.asarray(heatmap.values if isinstance(heatmap, Heatmap) else heatmap, dtype=float)
    m = np.asarray(mask) > 0
    if h.shape != m.shape:
        raise ValueError(f"heatmap {h.shape} and mask {m.shape} extents differ")
    total = h.sum()
    mass = float((h * m).sum() / total) if total > 0 else 0.0
    hot = h >= threshold
    union = np.logical_or(hot, m).sum()
    iou = float(np.logical_and(hot, m).sum() / union) if union else 1.0
    return FocusScore(mass, iou)


def colorize(values: np.ndarray) -> np.ndarray:
    stops = np.array([s for s, _ in COLOR_RAMP])
    colors = np.array([c for _, c in COLOR_RAMP], dtype=float)
    v = np.clip(values, 0.0, 1.0)
    rgb = np.stack([np.interp(v, stops, colors[:, k]) for k in range(3)], axis=-1)
    return np.round(rgb).astype(np.uint8)


def overlay_panel(image: np.ndarray, heatmap: Heatmap | np.ndarray) -> np.ndarray:
    """original | heatmap | blend, side by side (width 3W)."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.shape != image.shape[:2]:
        raise ValueError(f"heatmap {values.shape} does not match image {image.shape[:2]}")
    colored = colorize(values)
    blend = np.round(OVERLAY_WEIGHT * image.astype(float) + (1 - OVERLAY_WEIGHT) * colored).astype(np.uint8)
    return np.concatenate([image, colored, blend], axis=1)


def render_overlay(image: np.ndarray, heatmap: Heatmap | np.ndarray, path: str | Path) -> np.ndarray:
    """Write the panel as PNG or PPM (by suffix) and return it."""
    panel = overlay_panel(image, heatmap)
    try:
        write_image(path, panel)
    except OSError as exc:
        raise OSError(f"could not write overlay to {path}: {exc}") from exc
    return panel


def append_focus_rows(path: str | Path, rows: list[tuple[str, str, float, float]]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["sample", "model", "mass_fraction", "iou"])
        for sample, model, mass, iou in rows:
            w.writerow([sample, model, repr(float(mass)), repr(float(iou))])

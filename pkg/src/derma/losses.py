"""Segmentation and classification objectives."""
from __future__ import annotations

from typing import NamedTuple

import torch

Tensor = torch.Tensor

PROB_CLIP = 1e-7
DICE_EPS = 1e-6
AUX_WEIGHTS = (0.2, 0.1)


class MaskPair(NamedTuple):
    probs: Tensor
    target: Tensor


def _check_pair(probs: Tensor, target: Tensor) -> None:
    if probs.shape != target.shape:
        raise ValueError(f"prediction {tuple(probs.shape)} and target {tuple(target.shape)} differ in shape")


def dice_loss(probs: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps), pooled over every element."""
    _check_pair(probs, target)
    inter = (probs * target).sum()
    return 1.0 - (2.0 * inter + eps) / (target.sum() + probs.sum() + eps)


def bce_loss(probs: Tensor, target: Tensor) -> Tensor:
    _check_pair(probs, target)
    p = probs.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -(target * p.log() + (1.0 - target) * (1.0 - p).log()).mean()


def seg_main_loss(probs: Tensor, target: Tensor, eps: float = DICE_EPS) -> Tensor:
    return bce_loss(probs, target) + dice_loss(probs, target, eps)


def seg_total_loss(final: MaskPair, aux1: MaskPair, aux2: MaskPair, eps: float = DICE_EPS) -> Tensor:
    if not (torch.equal(final.target, aux1.target) and torch.equal(final.target, aux2.target)):
        raise ValueError("deep-supervision outputs must share one ground truth")
    w1, w2 = AUX_WEIGHTS
    return (seg_main_loss(*final, eps=eps) + w1 * seg_main_loss(*aux1, eps=eps)
            + w2 * seg_main_loss(*aux2, eps=eps))


def seg_loss_from_logits(output, target: Tensor) -> Tensor:
    """Total loss for a training-mode SegOutput, or the main loss if aux heads are absent."""
    final = MaskPair(torch.sigmoid(output.final), target)
    if output.aux1 is None:
        return seg_main_loss(*final)
    return seg_total_loss(final, MaskPair(torch.sigmoid(output.aux1), target),
                          MaskPair(torch.sigmoid(output.aux2), target))


def cross_entropy_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean of -log softmax(logits)[label] in log-sum-exp form."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be (B, C), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    m = logits.amax(dim=1, keepdim=True).detach()
    lse = m.squeeze(1) + (logits - m).exp().sum(dim=1).log()
    picked = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    return (lse - picked).mean()

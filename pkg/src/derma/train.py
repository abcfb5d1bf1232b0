"""Adam, step-halving schedules, the two training loops and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .clsnet import ClsConfig, build_classifier
from .data import BalancedEntry, LesionData, make_batch
from .losses import cross_entropy_loss, seg_loss_from_logits
from .metrics import MetricReport, SegMetricAccumulator, classification_metrics
from .numerics import NonFiniteError, check_finite, derive_seed, forward_and_backward
from .segnet import DeepUNet, SegConfig

log = logging.getLogger(__name__)

LR_PERIOD = {"seg": 4, "cls": 3}


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params: list[torch.Tensor], grads: list[torch.Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update in place; weight decay is added to the gradient (L2)."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.betas
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def lr_schedule(epoch: int, task: str, lr0: float = 1e-4, period: int | None = None) -> float:
    """lr0 * 0.5 ** floor(epoch / period); period 4 for segmentation, 3 for classification."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    period = period or LR_PERIOD[task]
    return lr0 * 0.5 ** (epoch // period)


@dataclass
class TrainConfig:
    task: str = "seg"
    epochs: int = 12
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    lr_period: int | None = None
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.task not in LR_PERIOD:
            raise ValueError(f"task must be 'seg' or 'cls', got {self.task!r}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (batch norm)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TrainResult:
    history: list[tuple[int, str, str, float]]
    best_epoch: int
    best_score: float
    best_state: dict
    optimizer: AdamState


def write_history(path: str | Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in history:
            w.writerow([epoch, split, metric, repr(float(value))])


def seed_everything(seed: int) -> None:
    torch.manual_seed(derive_seed(seed, "torch"))


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def _step(model: nn.Module, loss_fn, state: AdamState) -> float:
    params = [p for p in model.parameters() if p.requires_grad]
    value, grads = forward_and_backward(loss_fn, params)
    check_finite("loss", value)
    for g in grads:
        check_finite("gradient", g)
    adam_step(params, grads, state)
    return float(value)


def _select(history_scores: list[float]) -> int:
    # argmax with ties resolved to the earliest epoch
    return int(np.argmax(history_scores))


@torch.no_grad()
def predict_masks(model: DeepUNet, data: LesionData, batch_size: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for chunk in _batches(np.arange(len(data)), batch_size):
        batch = make_batch(data, chunk)
        out.append(torch.sigmoid(model(batch.original).final)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0,) + data.masks.shape[1:], np.float32)


def evaluate_segmentation(model: DeepUNet, data: LesionData, batch_size: int = 32) -> tuple[float, float]:
    """(mDice, mIoU) averaged per image at threshold 0.5."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    acc = SegMetricAccumulator()
    acc.update(predict_masks(model, data, batch_size), data.masks)
    return acc.result()


@torch.no_grad()
def predict_logits(model: nn.Module, data: LesionData, batch_size: int = 64,
                   segment_masks: np.ndarray | None = None) -> np.ndarray:
    model.eval()
    out = []
    for chunk in _batches(np.arange(len(data)), batch_size):
        b = make_batch(data, chunk, segment_masks=segment_masks)
        out.append(model(b.original, b.segmented, b.metadata, b.alpha).numpy())
    return np.concatenate(out)


def evaluate_classifier(model: nn.Module, data: LesionData, batch_size: int = 64,
                        segment_masks: np.ndarray | None = None) -> MetricReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, data, batch_size, segment_masks)
    return classification_metrics(logits, data.labels, data.classes)


def evaluate(model: nn.Module, data: LesionData, task: str, **kwargs):
    if task == "seg":
        return evaluate_segmentation(model, data, **kwargs)
    if task == "cls":
        return evaluate_classifier(model, data, **kwargs)
    raise ValueError(f"unknown task {task!r}")


def train_segmentation(model: DeepUNet, train: LesionData, val: LesionData, cfg: TrainConfig) -> TrainResult:
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, scores, best_state = [], [], None
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, "seg", cfg.lr, cfg.lr_period)
        rng = np.random.default_rng(derive_seed(cfg.seed, f"seg-epoch-{epoch}"))
        model.train()
        losses, t0 = [], time.perf_counter()
        for chunk in _batches(rng.permutation(len(train)), cfg.batch_size):
            seeds = rng.integers(0, 2**62, size=len(chunk)) if cfg.augment else None
            b = make_batch(train, chunk, seeds)
            try:
                losses.append(_step(model, lambda: seg_loss_from_logits(model(b.original), b.masks), state))
            except NonFiniteError as exc:
                raise NonFiniteError(f"segmentation epoch {epoch}: {exc}") from exc
        mdice, miou = evaluate_segmentation(model, val)
        scores.append(mdice)
        if _select(scores) == epoch:
            best_state = copy.deepcopy(model.state_dict())
        history += [(epoch, "train", "lr", state.lr), (epoch, "train", "loss", float(np.mean(losses))),
                    (epoch, "val", "mdice", mdice), (epoch, "val", "miou", miou)]
        log.info("seg epoch %d loss %.4f val mDice %.4f mIoU %.4f (%.1fs)", epoch, np.mean(losses), mdice, miou,
                 time.perf_counter() - t0)
    best = _select(scores)
    model.load_state_dict(best_state)
    return TrainResult(history, best, scores[best], best_state, state)


def train_classifier(model: nn.Module, train: LesionData, val: LesionData, cfg: TrainConfig,
                     entries: list[BalancedEntry] | None = None,
                     train_masks: np.ndarray | None = None, val_masks: np.ndarray | None = None) -> TrainResult:
    """Cross-entropy training; ``entries`` is a balanced view of ``train`` (default: each record once).

    ``train_masks`` / ``val_masks`` replace the ground-truth masks used for the
    segmented stream, e.g. with segmentation-net predictions.
    """
    if entries is None:
        base = derive_seed(cfg.seed, "cls-entries")
        entries = [BalancedEntry(i, base + i) for i in range(len(train))]
    index = np.array([e.index for e in entries], dtype=np.int64)
    aug = np.array([e.aug_seed for e in entries], dtype=np.int64)
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, scores, best_state = [], [], None
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, "cls", cfg.lr, cfg.lr_period)
        rng = np.random.default_rng(derive_seed(cfg.seed, f"cls-epoch-{epoch}"))
        model.train()
        losses = []
        for chunk in _batches(rng.permutation(len(entries)), cfg.batch_size):
            seeds = [derive_seed(int(s), f"epoch-{epoch}") for s in aug[chunk]] if cfg.augment else None
            b = make_batch(train, index[chunk], seeds, segment_masks=train_masks)

            def loss_fn():
                return cross_entropy_loss(model(b.original, b.segmented, b.metadata, b.alpha), b.labels)

            try:
                losses.append(_step(model, loss_fn, state))
            except NonFiniteError as exc:
                raise NonFiniteError(f"classification epoch {epoch}: {exc}") from exc
        report = evaluate_classifier(model, val, segment_masks=val_masks)
        scores.append(report.accuracy)
        if _select(scores) == epoch:
            best_state = copy.deepcopy(model.state_dict())
        history += [(epoch, "train", "lr", state.lr), (epoch, "train", "loss", float(np.mean(losses))),
                    (epoch, "val", "accuracy", report.accuracy)]
        log.info("cls epoch %d loss %.4f val acc %.4f", epoch, np.mean(losses), report.accuracy)
    best = _select(scores)
    model.load_state_dict(best_state)
    return TrainResult(history, best, scores[best], best_state, state)


# ------------------------------------------------------------- checkpoints


def save_model(path: str | Path, model: nn.Module, optimizer: AdamState | None = None,
               extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    extra = dict(extra or {})
    if isinstance(model, DeepUNet):
        kind = "seg"
    else:
        kind = "cls"
        extra["mode"] = model.mode
    if optimizer is not None:
        extra["optimizer"] = {"lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps,
                              "weight_decay": optimizer.weight_decay, "step": optimizer.step}
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            tensors[f"optim.m.{i}"] = m
            tensors[f"optim.v.{i}"] = v
    save_checkpoint(path, tensors, kind, asdict(model.config), extra)


def load_model(path: str | Path) -> tuple[nn.Module, dict]:
    """Rebuild a model from a checkpoint; returns (model in eval mode, header)."""
    header, tensors = load_checkpoint(path)
    if header["kind"] == "seg":
        model = DeepUNet(SegConfig(**header["config"]))
    elif header["kind"] == "cls":
        model = build_classifier(ClsConfig(**header["config"]), header["extra"]["mode"])
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {header['kind']!r}")
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    model.eval()
    return model, header


def load_optimizer(header: dict, tensors: dict[str, torch.Tensor]) -> AdamState | None:
    spec = header["extra"].get("optimizer")
    if spec is None:
        return None
    n = sum(1 for k in tensors if k.startswith("optim.m."))
    return AdamState(spec["lr"], tuple(spec["betas"]), spec["eps"], spec["weight_decay"], spec["step"],
                     [tensors[f"optim.m.{i}"] for i in range(n)], [tensors[f"optim.v.{i}"] for i in range(n)])

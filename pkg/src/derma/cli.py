"""``derma`` command line: corpus generation, balancing, training, evaluation and Grad-CAM export.

Every subcommand writes only under ``--out`` and echoes its effective
configuration to ``config.resolved`` there. Exit status: 0 success,
1 invalid input or configuration, 2 failure while running.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .clsnet import ClsConfig, build_classifier
from .config import ConfigError
from .data import (BalancePolicy, LesionData, balance_manifest, load_data, load_manifest, make_batch,
                   metadata_dim, split_train_val)
from .explain import append_focus_rows, focus_score, grad_cam, render_overlay
from .numerics import NonFiniteError, derive_seed
from .segnet import DeepUNet, SegConfig
from .synth import SynthConfig, default_classes, synth_generate
from .train import (TrainConfig, evaluate_classifier, evaluate_segmentation, load_model, predict_masks,
                    save_model, seed_everything, train_classifier, train_segmentation, write_history)

log = logging.getLogger("derma")

COMMANDS = {
    "synth-gen": "write a synthetic lesion corpus (images, masks, manifest)",
    "balance": "compute the balanced instance list for a manifest",
    "seg-train": "train the segmentation network",
    "seg-eval": "evaluate a segmentation checkpoint (mDice, mIoU)",
    "cls-train": "train a classifier (mode = dual_meta | dual | original | segmented)",
    "cls-eval": "evaluate a classifier checkpoint",
    "gradcam": "write Grad-CAM panels and focus scores for every manifest sample",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="derma", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="run directory (all outputs go here)")
        for key, spec in cfgmod.KEYS.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="V",
                           help=f"{spec.help} [{spec.default}]")
    return parser


def usage() -> str:
    lines = ["usage: derma <command> --out DIR [--config FILE] [--key value ...]", "", "commands:"]
    lines += [f"  {name:<10} {text}" for name, text in COMMANDS.items()]
    return "\n".join(lines)


# ------------------------------------------------------------------ helpers


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"--{key.replace('_', '-')} is required")
        if key in cfgmod.PATH_KEYS and not Path(cfg[key]).exists():
            raise ConfigError(f"--{key.replace('_', '-')}: no such file {cfg[key]}")


def _manifest(cfg: dict, classes=None):
    _require(cfg, "manifest")
    classes = classes or (list(cfg["classes"]) if cfg["classes"] else None)
    return load_manifest(cfg["manifest"], classes)


def _split(cfg: dict, manifest):
    rng = np.random.default_rng(derive_seed(cfg["seed"], "split"))
    train, val = split_train_val(manifest, 1.0 - cfg["val_fraction"], rng)
    if not val:
        raise ConfigError("validation split is empty; add records or raise val_fraction")
    return train, val


def _seg_masks(cfg: dict, data: LesionData) -> np.ndarray | None:
    if cfg["seg_checkpoint"] is None:
        return None
    _require(cfg, "seg_checkpoint")
    model, header = load_model(cfg["seg_checkpoint"])
    if header["kind"] != "seg":
        raise ConfigError("--seg-checkpoint must hold a segmentation model")
    return (predict_masks(model, data) >= 0.5).astype(np.uint8)


def _cls_config(cfg: dict, n_classes: int) -> ClsConfig:
    return ClsConfig(channels=cfg["cls_channels"], grid_side=cfg["cls_grid"], heads=cfg["cls_heads"],
                     encoder_channels=cfg["cls_encoder_channels"], tab_in_dim=metadata_dim(),
                     n_classes=n_classes, dropout=cfg["cls_dropout"], input_side=cfg["side"])


def _write_seg_metrics(path: Path, mdice: float, miou: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "name", "value"])
        w.writerow(["mdice", "", repr(float(mdice))])
        w.writerow(["miou", "", repr(float(miou))])


def _load_cls(cfg: dict):
    _require(cfg, "checkpoint")
    model, header = load_model(cfg["checkpoint"])
    if header["kind"] != "cls":
        raise ConfigError("--checkpoint must hold a classifier")
    return model, header


# ----------------------------------------------------------------- commands


def cmd_synth_gen(cfg: dict, out: Path) -> None:
    classes = default_classes()
    if cfg["classes"]:
        if len(cfg["classes"]) != len(classes):
            raise ConfigError(f"synth-gen generates {len(classes)} classes; got {len(cfg['classes'])} names")
        for spec, name in zip(classes, cfg["classes"]):
            spec.name = name
    synth = SynthConfig(side=cfg["side"], classes=classes,
                        class_weights=list(cfg["synth_class_weights"]) if cfg["synth_class_weights"] else None,
                        shape_noise=cfg["synth_shape_noise"], decoy_prob=cfg["synth_decoy_prob"],
                        missing_all=cfg["synth_missing_all"], missing_field=cfg["synth_missing_field"])
    manifest = synth_generate(cfg["synth_n"], out / "corpus", synth, seed=derive_seed(cfg["seed"], "synth"))
    log.info("wrote %d samples to %s", len(manifest), out / "corpus")


def cmd_balance(cfg: dict, out: Path) -> None:
    manifest = _manifest(cfg)
    policy = BalancePolicy(cfg["balance_factor"], cfg["balance_cap"], cfg["balance_kmax"], cfg["balance_target"])
    entries, target = balance_manifest(manifest, policy, np.random.default_rng(derive_seed(cfg["seed"], "balance")))
    with open(out / "balanced.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "image", "label", "aug_seed"])
        for e in entries:
            r = manifest.records[e.index]
            w.writerow([e.index, r.image.name, r.label, e.aug_seed])
    after = {c: 0 for c in manifest.classes}
    for e in entries:
        after[manifest.records[e.index].label] += 1
    with open(out / "balance_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "before", "after", "target"])
        for c, n in manifest.class_counts().items():
            w.writerow([c, n, after[c], target])


def cmd_seg_train(cfg: dict, out: Path) -> None:
    manifest = _manifest(cfg)
    data = load_data(manifest, cfg["side"])
    train_idx, val_idx = _split(cfg, manifest)
    seed_everything(cfg["seed"])
    model = DeepUNet(SegConfig(stage_channels=cfg["seg_stage_channels"], decoder_channels=cfg["seg_decoder_channels"],
                               aspp_rates=cfg["seg_aspp_rates"], input_side=cfg["side"]))
    tcfg = TrainConfig(task="seg", epochs=cfg["seg_epochs"], batch_size=cfg["seg_batch"], lr=cfg["seg_lr"],
                       weight_decay=cfg["seg_weight_decay"], lr_period=cfg["seg_lr_period"], seed=cfg["seed"],
                       augment=cfg["augment"])
    result = train_segmentation(model, data.subset(train_idx), data.subset(val_idx), tcfg)
    write_history(out / "history.csv", result.history)
    save_model(out / "model.ckpt", model, result.optimizer, {"best_epoch": result.best_epoch})
    _write_seg_metrics(out / "metrics.csv", *evaluate_segmentation(model, data.subset(val_idx)))


def cmd_seg_eval(cfg: dict, out: Path) -> None:
    _require(cfg, "checkpoint")
    model, header = load_model(cfg["checkpoint"])
    if header["kind"] != "seg":
        raise ConfigError("--checkpoint must hold a segmentation model")
    data = load_data(_manifest(cfg), model.config.input_side)
    _write_seg_metrics(out / "metrics.csv", *evaluate_segmentation(model, data))


def cmd_cls_train(cfg: dict, out: Path) -> None:
    manifest = _manifest(cfg)
    data = load_data(manifest, cfg["side"])
    train_idx, val_idx = _split(cfg, manifest)
    masks = _seg_masks(cfg, data)
    entries = None
    if cfg["balance"]:
        policy = BalancePolicy(cfg["balance_factor"], cfg["balance_cap"], cfg["balance_kmax"], cfg["balance_target"])
        rng = np.random.default_rng(derive_seed(cfg["seed"], "balance"))
        entries, _ = balance_manifest(manifest.subset(train_idx), policy, rng)
    seed_everything(cfg["seed"])
    model = build_classifier(_cls_config(cfg, len(manifest.classes)), cfg["mode"])
    tcfg = TrainConfig(task="cls", epochs=cfg["cls_epochs"], batch_size=cfg["cls_batch"], lr=cfg["cls_lr"],
                       weight_decay=cfg["cls_weight_decay"], lr_period=cfg["cls_lr_period"], seed=cfg["seed"],
                       augment=cfg["augment"])
    train_masks = None if masks is None else masks[train_idx]
    val_masks = None if masks is None else masks[val_idx]
    result = train_classifier(model, data.subset(train_idx), data.subset(val_idx), tcfg, entries,
                              train_masks, val_masks)
    write_history(out / "history.csv", result.history)
    save_model(out / "model.ckpt", model, result.optimizer,
               {"classes": list(manifest.classes), "best_epoch": result.best_epoch})
    report = evaluate_classifier(model, data.subset(val_idx), segment_masks=val_masks)
    report.write_csv(out / "metrics.csv")
    report.write_confusion_csv(out / "confusion.csv")


def cmd_cls_eval(cfg: dict, out: Path) -> None:
    model, header = _load_cls(cfg)
    manifest = _manifest(cfg, header["extra"].get("classes"))
    data = load_data(manifest, model.config.input_side)
    report = evaluate_classifier(model, data, segment_masks=_seg_masks(cfg, data))
    report.write_csv(out / "metrics.csv")
    report.write_confusion_csv(out / "confusion.csv")


def cmd_gradcam(cfg: dict, out: Path) -> None:
    if cfg["panel_format"] not in ("png", "ppm"):
        raise ConfigError(f"panel_format must be png or ppm, got {cfg['panel_format']!r}")
    model, header = _load_cls(cfg)
    manifest = _manifest(cfg, header["extra"].get("classes"))
    data = load_data(manifest, model.config.input_side)
    masks = _seg_masks(cfg, data)
    panels = out / "panels"
    panels.mkdir(exist_ok=True)
    rows = []
    for i, record in enumerate(manifest.records):
        b = make_batch(data, [i], segment_masks=masks)
        heat = grad_cam(model, (b.original, b.segmented, b.metadata, b.alpha), cfg["target_class"], cfg["layer"])
        name = f"{i:05d}_{record.image.stem}"
        render_overlay(data.images[i], heat, panels / f"{name}.{cfg['panel_format']}")
        score = focus_score(heat, data.masks[i], cfg["focus_threshold"])
        rows.append((name, model.mode, score.mass_fraction, score.iou))
    append_focus_rows(out / "focus.csv", rows)


HANDLERS = {
    "synth-gen": cmd_synth_gen, "balance": cmd_balance, "seg-train": cmd_seg_train, "seg-eval": cmd_seg_eval,
    "cls-train": cmd_cls_train, "cls-eval": cmd_cls_eval, "gradcam": cmd_gradcam,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    if not argv or argv[0] in ("-h", "--help"):
        print(usage())
        return 0 if argv else 1
    if argv[0] not in COMMANDS:
        print(f"derma: unknown command {argv[0]!r}\n\n{usage()}", file=sys.stderr)
        return 1
    try:
        args = build_parser().parse_args(argv)
        file_values, base = {}, None
        if args.config is not None:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"--config: no such file {args.config}")
            file_values, base = cfgmod.parse_text(path.read_text(), str(path)), path.parent
        overrides = {k: v for k, v in vars(args).items() if k in cfgmod.KEYS and v is not None}
        cfg = cfgmod.resolve(file_values, overrides, base)
        if args.out is None:
            raise ConfigError("--out is required")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfgmod.dump(cfg, args.command))
        torch.set_num_threads(1)
        HANDLERS[args.command](cfg, out)
    except NonFiniteError as exc:
        print(f"derma: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"derma: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"derma: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Every key is declared in
``KEYS`` with its type, default and meaning; anything else is rejected.
Command-line ``--key value`` pairs override the file.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _opt(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    help: str


KEYS: dict[str, Key] = {
    # shared
    "seed": Key(int, "0", "root seed; every random stream is derived from it"),
    "manifest": Key(_opt(str), "none", "input manifest CSV (image,mask,label,age,sex,site)"),
    "checkpoint": Key(_opt(str), "none", "model checkpoint to evaluate or explain"),
    "side": Key(int, "64", "image side after resizing"),
    "classes": Key(_opt(_strs), "none", "class names in label order (default: sorted manifest labels)"),
    "val_fraction": Key(float, "0.2", "stratified validation share"),
    # synth-gen
    "synth_n": Key(int, "200", "number of synthetic samples"),
    "synth_class_weights": Key(_opt(_floats), "none", "relative class frequencies"),
    "synth_shape_noise": Key(float, "0.2", "chance a lesion takes another class's shape"),
    "synth_decoy_prob": Key(float, "1.0", "chance of a paler decoy blob"),
    "synth_missing_all": Key(float, "0.1", "chance all metadata fields are missing"),
    "synth_missing_field": Key(float, "0.05", "per-field missing chance"),
    # balance
    "balance": Key(_bool, "true", "balance the classification training split"),
    "balance_factor": Key(float, "1.0", "target T = median class count * factor"),
    "balance_cap": Key(float, "2.0", "classes above cap * T are subsampled"),
    "balance_kmax": Key(int, "10", "at most k_max instances per record when expanding"),
    "balance_target": Key(_opt(int), "none", "explicit target T"),
    # segmentation
    "seg_stage_channels": Key(_ints, "16,32,64", "backbone channels per stride-2 stage"),
    "seg_decoder_channels": Key(_ints, "48,24,16", "decoder channels, deepest first"),
    "seg_aspp_rates": Key(_ints, "1,2,3", "ASPP dilation rates"),
    "seg_epochs": Key(int, "15", "segmentation epochs"),
    "seg_batch": Key(int, "8", "segmentation batch size"),
    "seg_lr": Key(float, "3e-3", "initial learning rate (halved every seg_lr_period epochs)"),
    "seg_lr_period": Key(int, "4", "epochs per halving"),
    "seg_weight_decay": Key(float, "0.0", "L2 weight decay"),
    "seg_checkpoint": Key(_opt(str), "none", "segmentation checkpoint whose masks feed the segmented stream"),
    # classification
    "mode": Key(str, "dual_meta", "dual_meta | dual | original | segmented"),
    "cls_channels": Key(int, "128", "token width C"),
    "cls_grid": Key(int, "8", "token grid side"),
    "cls_heads": Key(int, "4", "attention heads"),
    "cls_encoder_channels": Key(_ints, "16,32", "encoder stage channels before the token stage"),
    "cls_dropout": Key(float, "0.3", "dropout rate"),
    "cls_epochs": Key(int, "12", "classification epochs"),
    "cls_batch": Key(int, "32", "classification batch size"),
    "cls_lr": Key(float, "3e-3", "initial learning rate (halved every cls_lr_period epochs)"),
    "cls_lr_period": Key(int, "3", "epochs per halving"),
    "cls_weight_decay": Key(float, "1e-4", "L2 weight decay"),
    "augment": Key(_bool, "true", "random flips and rotations during training"),
    # gradcam
    "layer": Key(_opt(str), "none", "Grad-CAM layer (default: last block of the original-image encoder)"),
    "target_class": Key(_opt(int), "none", "explained class (default: predicted)"),
    "focus_threshold": Key(float, "0.5", "heatmap threshold for the focus IoU"),
    "panel_format": Key(str, "png", "png | ppm"),
}

PATH_KEYS = ("manifest", "checkpoint", "seg_checkpoint")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve(file_values: dict[str, str], overrides: dict[str, str], base: Path | None = None) -> dict:
    """Typed config: defaults, then the file, then overrides. Relative paths resolve against ``base``."""
    merged = {k: spec.default for k, spec in KEYS.items()}
    for key, value in list(file_values.items()) + list(overrides.items()):
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        merged[key] = value
    out = {}
    for key, text in merged.items():
        try:
            out[key] = KEYS[key].parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    for key in PATH_KEYS:
        if out[key] is not None:
            p = Path(out[key])
            if not p.is_absolute() and key in file_values and key not in overrides and base is not None:
                p = base / p
            out[key] = str(p.resolve())
    return out


def dump(config: dict, command: str) -> str:
    lines = [f"# derma {command}"]
    lines += [f"{k} = {_fmt(config[k])}" for k in KEYS]
    return "\n".join(lines) + "\n"

"""Synthetic lesion corpora for desk-scale training and tests.

Each image is textured skin with stray hairs and one lesion blob whose shape
family depends on the class; the mask is exactly the set of lesion pixels.
A thin rim of skin around the lesion carries a noisy class-dependent tint, and
a paler decoy blob (with a rim of a random class) may sit elsewhere, so the
full image alone is ambiguous about which blob matters. Metadata carries class
signal through the age mean and a preferred site.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import HAM10000_SITES, SEX_VOCAB, LesionData, Manifest, Record, encode_metadata, write_manifest
from .imageio import write_image

SHAPES = ("ellipse", "star", "ring")


@dataclass
class ClassSpec:
    name: str
    shape: str
    age_mean: float
    preferred_site: str
    age_sd: float = 15.0
    site_prob: float = 0.5


def default_classes() -> list[ClassSpec]:
    return [
        ClassSpec("c0", "ellipse", 35.0, "back"),
        ClassSpec("c1", "star", 50.0, "lower extremity"),
        ClassSpec("c2", "ring", 65.0, "face"),
    ]


@dataclass
class SynthConfig:
    side: int = 64
    classes: list[ClassSpec] = field(default_factory=default_classes)
    class_weights: list[float] | None = None
    shape_noise: float = 0.2  # chance the blob comes from another class's family
    missing_all: float = 0.1
    missing_field: float = 0.05
    max_hairs: int = 4
    rim_width: int = 4
    rim_strength: float = 25.0  # tint amplitude in 8-bit units per unit of chroma
    rim_noise: float = 0.7  # sd of the tint around its class centre (centres sit at radius 1)
    decoy_prob: float = 1.0
    decoy_pale: tuple[float, float] = (0.1, 0.3)  # decoy pigment is blended this far towards skin
    site_vocab: tuple[str, ...] = HAM10000_SITES


def _smooth_noise(rng: np.random.Generator, side: int, cells: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.normal(size=(1, 1, cells, cells)).astype(np.float32))
    return F.interpolate(coarse, size=(side, side), mode="bicubic", align_corners=False)[0, 0].numpy()


def lesion_mask(shape: str, side: int, rng: np.random.Generator, scale: float = 1.0,
                avoid: np.ndarray | None = None, tries: int = 50) -> np.ndarray | None:
    """Binary mask of one blob of the given family, fully inside the image.

    With ``avoid``, the blob's bounding disc must miss every nonzero pixel of
    it; None is returned if no such placement is found.
    """
    radius = rng.uniform(0.16, 0.25) * side * scale
    margin = radius + 2
    for _ in range(tries):
        cy, cx = rng.uniform(margin, side - margin, size=2)
        if avoid is None:
            break
        yy, xx = np.nonzero(avoid)
        if yy.size == 0 or np.min(np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)) > radius + 1:
            break
    else:
        return None
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    phase = rng.uniform(0, 2 * np.pi)
    if shape == "ellipse":
        ratio = rng.uniform(0.55, 0.8)
        u = dx * np.cos(phase) + dy * np.sin(phase)
        v = -dx * np.sin(phase) + dy * np.cos(phase)
        mask = (u / radius) ** 2 + (v / (radius * ratio)) ** 2 <= 1.0
    elif shape == "star":
        spikes = int(rng.integers(5, 8))
        mask = r <= radius * (0.68 + 0.32 * np.cos(spikes * theta + phase))
    elif shape == "ring":
        inner = rng.uniform(0.45, 0.6) * radius
        mask = (r <= radius) & (r >= inner)
    else:
        raise ValueError(f"unknown shape family {shape!r}")
    return mask.astype(np.uint8)


# orthonormal chroma plane (orthogonal to grey)
_CHROMA = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]]) / np.array([[np.sqrt(2.0)], [np.sqrt(6.0)]])


def dilate(mask: np.ndarray, width: int) -> np.ndarray:
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    return (F.max_pool2d(t, 2 * width + 1, stride=1, padding=width)[0, 0].numpy() > 0).astype(np.uint8)


def rim_tint(label: int, n_classes: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    """RGB offset for a class: a unit chroma vector at angle 2*pi*label/n plus isotropic noise."""
    angle = 2 * np.pi * label / n_classes
    xy = np.array([np.cos(angle), np.sin(angle)]) + rng.normal(0, noise, size=2)
    return xy @ _CHROMA


def _paint_blob(img, mask, pigment, tint, rim_width, rng):
    side = mask.shape[0]
    rim = dilate(mask, rim_width) & (1 - mask)
    img = img + rim[..., None] * tint[None, None, :]
    texture = 1.0 + 0.12 * _smooth_noise(rng, side, 8)
    blob = pigment[None, None, :] * texture[..., None] + rng.normal(0, 5, size=(side, side, 3))
    return np.where(mask[..., None] > 0, blob, img)


def render_image(mask: np.ndarray, rng: np.random.Generator, max_hairs: int = 4, tint=None,
                 decoy: np.ndarray | None = None, decoy_tint=None, rim_width: int = 4,
                 decoy_pale: tuple[float, float] = (0.1, 0.3)) -> np.ndarray:
    side = mask.shape[0]
    skin = np.array([rng.uniform(195, 235), rng.uniform(145, 185), rng.uniform(115, 155)])
    shade = 1.0 + 0.06 * _smooth_noise(rng, side, 4)
    img = skin[None, None, :] * shade[..., None] + rng.normal(0, 4, size=(side, side, 3))
    pigment = np.array([rng.uniform(80, 135), rng.uniform(45, 85), rng.uniform(30, 65)])
    zero = np.zeros(3)
    if decoy is not None:
        pale = pigment + rng.uniform(*decoy_pale) * (skin - pigment)
        img = _paint_blob(img, decoy, pale, zero if decoy_tint is None else decoy_tint, rim_width, rng)
    img = _paint_blob(img, mask, pigment, zero if tint is None else tint, rim_width, rng)
    for _ in range(int(rng.integers(0, max_hairs + 1))):
        p0, p1, p2 = rng.uniform(0, side, size=(3, 2))
        t = np.linspace(0, 1, 4 * side)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
        ij = np.clip(pts.astype(int), 0, side - 1)
        img[ij[:, 1], ij[:, 0]] = rng.uniform(20, 50)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _draw_metadata(spec: ClassSpec, cfg: SynthConfig, rng: np.random.Generator):
    known_sites = [s for s in cfg.site_vocab if s != "unknown"]
    age = float(np.clip(np.round(rng.normal(spec.age_mean, spec.age_sd)), 5, 95))
    sex = SEX_VOCAB[int(rng.integers(0, 2))]
    site = spec.preferred_site if rng.random() < spec.site_prob else known_sites[int(rng.integers(len(known_sites)))]
    if rng.random() < cfg.missing_all:
        return None, None, None
    fields = [v if rng.random() >= cfg.missing_field else None for v in (age, sex, site)]
    return tuple(fields)


def synth_samples(n: int, cfg: SynthConfig | None = None, rng: np.random.Generator | None = None):
    """Yield (image, mask, label index, age, sex, site) for ``n`` samples."""
    cfg = cfg or SynthConfig()
    rng = rng or np.random.default_rng(0)
    k = len(cfg.classes)
    if n < k:
        raise ValueError(f"need at least one sample per class: n={n} < {k} classes")
    weights = np.asarray(cfg.class_weights or [1.0] * k, dtype=float)
    weights = weights / weights.sum()
    # every class appears at least once; the rest are drawn by weight
    labels = np.concatenate([np.arange(k), rng.choice(k, size=n - k, p=weights)])
    labels = rng.permutation(labels)
    families = [c.shape for c in cfg.classes]
    for label in labels:
        spec = cfg.classes[int(label)]
        shape = spec.shape
        if rng.random() < cfg.shape_noise:
            others = [s for s in dict.fromkeys(families) if s != shape]
            shape = others[int(rng.integers(len(others)))]
        mask = lesion_mask(shape, cfg.side, rng)
        tint = cfg.rim_strength * rim_tint(int(label), k, cfg.rim_noise, rng)
        decoy, decoy_tint = None, None
        if rng.random() < cfg.decoy_prob:
            decoy = lesion_mask(SHAPES[int(rng.integers(len(SHAPES)))], cfg.side, rng, scale=0.7,
                                avoid=dilate(mask, 2 * cfg.rim_width))
            decoy_tint = cfg.rim_strength * rim_tint(int(rng.integers(k)), k, cfg.rim_noise, rng)
        image = render_image(mask, rng, cfg.max_hairs, tint, decoy, decoy_tint, cfg.rim_width, cfg.decoy_pale)
        yield (image, mask, int(label), *_draw_metadata(spec, cfg, rng))


def synth_data(n: int, cfg: SynthConfig | None = None, seed: int = 0) -> LesionData:
    """In-memory corpus, identical to what ``synth_generate`` writes for the same seed."""
    cfg = cfg or SynthConfig()
    rows = list(synth_samples(n, cfg, np.random.default_rng(seed)))
    classes = [c.name for c in cfg.classes]
    meta = [encode_metadata(Record(Path(), None, classes[r[2]], r[3], r[4], r[5]), cfg.site_vocab) for r in rows]
    return LesionData(
        np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]),
        np.array([r[2] for r in rows], dtype=np.int64),
        np.stack([m.features for m in meta]), np.array([m.alpha for m in meta], dtype=np.float32), classes,
    )


def synth_generate(n: int, out_dir: str | Path, cfg: SynthConfig | None = None, seed: int = 0) -> Manifest:
    """Write ``images/``, ``masks/`` (PGM, 0/255) and ``manifest.csv`` under ``out_dir``."""
    cfg = cfg or SynthConfig()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    classes = [c.name for c in cfg.classes]
    records = []
    for i, (image, mask, label, age, sex, site) in enumerate(synth_samples(n, cfg, np.random.default_rng(seed))):
        img_path, mask_path = out / "images" / f"{i:05d}.ppm", out / "masks" / f"{i:05d}.pgm"
        write_image(img_path, image)
        write_image(mask_path, mask * 255)
        records.append(Record(img_path, mask_path, classes[label], age, sex, site))
    manifest = Manifest(records, classes, out)
    write_manifest(out / "manifest.csv", manifest)
    return manifest

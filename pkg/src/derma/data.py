"""Manifests, preprocessing, augmentation, metadata encoding, balancing and splitting."""
from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imageio import read_image


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MANIFEST_HEADER = ["image", "mask", "label", "age", "sex", "site"]
SEX_VOCAB = ("male", "female", "unknown")
HAM10000_SITES = (
    "abdomen", "acral", "back", "chest", "ear", "face", "foot", "genital", "hand",
    "lower extremity", "neck", "scalp", "trunk", "upper extremity", "unknown",
)
MAX_ROTATION_DEG = 15.0
FLIP_PROB = 0.5
AGE_DIVISOR = 100.0


@dataclass
class Record:
    image: Path
    mask: Path | None
    label: str
    age: float | None = None
    sex: str | None = None
    site: str | None = None

    @property
    def field_available(self) -> tuple[bool, bool, bool]:
        return self.age is not None, self.sex is not None, self.site is not None


@dataclass
class Manifest:
    records: list[Record]
    classes: list[str]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        return np.array([index[r.label] for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Manifest":
        return Manifest([self.records[i] for i in indices], self.classes, self.root)

    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for r in self.records:
            counts[r.label] += 1
        return counts


def _blank(value: str) -> bool:
    return value.strip() == ""


def load_manifest(path: str | Path, classes: list[str] | None = None, check_files: bool = True) -> Manifest:
    """Parse a ``image,mask,label,age,sex,site`` CSV; paths are relative to the CSV's directory."""
    path = Path(path)
    root = path.parent
    records: list[Record] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            image, mask, label, age, sex, site = (v.strip() for v in row)
            if not image or not label:
                raise ValueError(f"{path}:{lineno}: image and label are required")
            try:
                age_v = None if _blank(age) else float(age)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: age {age!r} is not a number") from None
            sex_v = None if _blank(sex) else sex.lower()
            if sex_v is not None and sex_v not in SEX_VOCAB:
                raise ValueError(f"{path}:{lineno}: sex must be one of {SEX_VOCAB}, got {sex!r}")
            rec = Record(root / image, root / mask if mask else None, label, age_v, sex_v,
                         None if _blank(site) else site.lower())
            if check_files:
                for p in (rec.image, rec.mask):
                    if p is not None and not p.exists():
                        raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
            records.append(rec)
    if classes is None:
        classes = sorted({r.label for r in records})
    else:
        unknown = sorted({r.label for r in records} - set(classes))
        if unknown:
            raise ValueError(f"{path}: labels {unknown} are not in the configured classes {classes}")
    return Manifest(records, list(classes), root)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p: Path | None) -> str:
        return "" if p is None else os.path.relpath(p, root)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            age = "" if r.age is None else f"{r.age:g}"
            w.writerow([rel(r.image), rel(r.mask), r.label, age, r.sex or "", r.site or ""])


# ------------------------------------------------------------------ images


def to_float(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float (3, H, W) in [0, 1]."""
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an 8-bit RGB image, got dtype {image.dtype} shape {image.shape}")
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


def resize(x: torch.Tensor, side: int, mode: str = "bilinear") -> torch.Tensor:
    """Resize a (C, H, W) or (B, C, H, W) float tensor to ``side`` x ``side``."""
    batched = x.ndim == 4
    x4 = x if batched else x.unsqueeze(0)
    if tuple(x4.shape[-2:]) != (side, side):
        kwargs = {"align_corners": False} if mode == "bilinear" else {}
        x4 = F.interpolate(x4, size=(side, side), mode=mode, **kwargs)
    return x4 if batched else x4[0]


def normalize(x: torch.Tensor) -> torch.Tensor:
    shape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(shape)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(shape)
    return (x - mean) / std


def preprocess(image: np.ndarray, side: int = 224) -> torch.Tensor:
    """8-bit RGB -> resized, [0, 1]-scaled, ImageNet-normalised (3, side, side) tensor."""
    return normalize(resize(to_float(image), side))


def apply_mask(original: torch.Tensor | np.ndarray, mask) -> torch.Tensor | np.ndarray:
    """Zero every pixel outside the binary mask; works on (3, H, W), (B, 3, H, W) or uint8 (H, W, 3)."""
    if isinstance(original, np.ndarray):
        m = np.asarray(mask)
        if m.shape != original.shape[:2]:
            raise ValueError(f"mask {m.shape} does not match image {original.shape[:2]}")
        return original * (m > 0)[..., None].astype(original.dtype)
    m = torch.as_tensor(mask, dtype=original.dtype)
    if m.shape[-2:] != original.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape)} does not match image {tuple(original.shape)}")
    if m.ndim == original.ndim - 1:
        m = m.unsqueeze(-3)
    return original * (m > 0).to(original.dtype)


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    angle: float  # degrees, counter-clockwise


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < FLIP_PROB)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return AugmentParams(flip, angle)


def _rotation_grid(angles_deg: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    theta = torch.deg2rad(angles_deg.to(torch.float64))
    cos, sin = torch.cos(theta), torch.sin(theta)
    zero = torch.zeros_like(cos)
    mat = torch.stack([torch.stack([cos, -sin, zero], -1), torch.stack([sin, cos, zero], -1)], 1)
    return F.affine_grid(mat.to(torch.float32), list(shape), align_corners=False)


def augment_batch(images: torch.Tensor, masks: torch.Tensor | None, params: list[AugmentParams]):
    """Flip then rotate each sample; bilinear for images, nearest for masks, black borders.

    ``images`` is (B, 3, H, W) in [0, 1] (pre-normalisation); ``masks`` is (B, 1, H, W).
    """
    flips = torch.tensor([p.flip for p in params])
    angles = torch.tensor([p.angle for p in params])
    images = torch.where(flips.view(-1, 1, 1, 1), images.flip(-1), images)
    if masks is not None:
        masks = torch.where(flips.view(-1, 1, 1, 1), masks.flip(-1), masks)
    if bool((angles != 0).any()):
        grid = _rotation_grid(angles, images.shape).to(images.dtype)
        images = F.grid_sample(images, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        if masks is not None:
            masks = F.grid_sample(masks, grid.to(masks.dtype), mode="nearest", padding_mode="zeros",
                                  align_corners=False)
    return images, masks


def augment(image: torch.Tensor, mask: torch.Tensor | None, rng: np.random.Generator):
    """Random horizontal flip (p = 0.5) and rotation in [-15, 15] degrees, shared by image and mask."""
    params = sample_augment_params(rng)
    imgs, masks = augment_batch(image.unsqueeze(0), None if mask is None else mask.view(1, 1, *mask.shape[-2:]),
                                [params])
    return imgs[0], (None if masks is None else masks[0, 0]), params


# ---------------------------------------------------------------- metadata


@dataclass
class MetadataVector:
    features: np.ndarray
    alpha: float
    field_available: tuple[bool, bool, bool]


def metadata_dim(site_vocab=HAM10000_SITES) -> int:
    return 1 + len(SEX_VOCAB) + len(site_vocab)


def encode_metadata(record: Record, site_vocab=HAM10000_SITES) -> MetadataVector:
    """age/100 clipped to [0, 1], one-hot sex, one-hot site; alpha is 0 only if all three are missing."""
    site_vocab = tuple(site_vocab)
    vec = np.zeros(metadata_dim(site_vocab), dtype=np.float32)
    if record.age is not None:
        vec[0] = min(max(record.age / AGE_DIVISOR, 0.0), 1.0)
    if record.sex is not None:
        vec[1 + SEX_VOCAB.index(record.sex)] = 1.0
    if record.site is not None:
        site = record.site
        if site not in site_vocab:
            if "unknown" not in site_vocab:
                raise ValueError(f"site {site!r} not in vocabulary and no 'unknown' entry to map it to")
            warnings.warn(f"unknown site {site!r} mapped to 'unknown'", stacklevel=2)
            site = "unknown"
        vec[1 + len(SEX_VOCAB) + site_vocab.index(site)] = 1.0
    avail = record.field_available
    return MetadataVector(vec, 1.0 if any(avail) else 0.0, avail)


# --------------------------------------------------------------- balancing


@dataclass(frozen=True)
class BalancedEntry:
    index: int  # position in the source manifest
    aug_seed: int


@dataclass
class BalancePolicy:
    factor: float = 1.0
    cap_factor: float = 2.0
    k_max: int = 10
    target: int | None = None


def balance_manifest(manifest: Manifest, policy: BalancePolicy | None = None,
                     rng: np.random.Generator | None = None) -> tuple[list[BalancedEntry], int]:
    """Subsample over-represented classes and expand small ones with augmentation instances.

    Target T is the median class count times ``factor`` (unless set explicitly).
    Classes above ``cap_factor * T`` are subsampled to the cap; classes below T
    get ``min(T, k_max * n)`` instances spread evenly over their records. Every
    emitted instance carries its own augmentation seed. Returns (entries, T).
    """
    policy = policy or BalancePolicy()
    rng = rng or np.random.default_rng(0)
    labels = manifest.labels()
    counts = np.bincount(labels, minlength=len(manifest.classes))
    if (counts == 0).any():
        empty = [manifest.classes[i] for i in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes without records cannot be balanced: {empty}")
    target = policy.target or max(1, int(round(float(np.median(counts)) * policy.factor)))
    cap = int(math.floor(policy.cap_factor * target))
    chosen: list[int] = []
    for c in range(len(manifest.classes)):
        idx = np.flatnonzero(labels == c)
        n = len(idx)
        if n > cap:
            chosen += sorted(rng.choice(idx, size=cap, replace=False).tolist())
        elif n < target:
            effective = min(target, policy.k_max * n)
            reps = np.full(n, effective // n)
            reps[rng.permutation(n)[: effective % n]] += 1
            for i, r in zip(idx, reps):
                chosen += [int(i)] * int(r)
        else:
            chosen += idx.tolist()
    base = int(rng.integers(0, 2**62))
    return [BalancedEntry(int(i), base + k) for k, i in enumerate(chosen)], target


def split_train_val(manifest: Manifest, fraction: float = 0.8,
                    rng: np.random.Generator | None = None) -> tuple[list[int], list[int]]:
    """Stratified split; returns sorted (train indices, val indices)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = rng or np.random.default_rng(0)
    labels = manifest.labels()
    train, val = [], []
    for c, name in enumerate(manifest.classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            warnings.warn(f"class {name!r} has {len(idx)} record(s); kept in the training split", stacklevel=2)
            train += idx.tolist()
            continue
        idx = rng.permutation(idx)
        n_train = min(len(idx) - 1, max(1, int(round(len(idx) * fraction))))
        train += idx[:n_train].tolist()
        val += idx[n_train:].tolist()
    return sorted(train), sorted(val)


# ----------------------------------------------------------------- loading


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("DERMA_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def _load_pair(record: Record, side: int) -> tuple[np.ndarray, np.ndarray]:
    img = read_image(record.image)
    if img.ndim != 3:
        raise ValueError(f"{record.image}: expected an RGB image")
    if record.mask is not None:
        mask = read_image(record.mask)
        if mask.ndim == 3:
            mask = mask[..., 0]
        mask = (mask > 127).astype(np.uint8)
    else:
        mask = np.ones(img.shape[:2], dtype=np.uint8)
    if img.shape[0] != side or img.shape[1] != side:
        t = resize(to_float(img), side)
        img = np.round(t.permute(1, 2, 0).numpy() * 255.0).clip(0, 255).astype(np.uint8)
        m = resize(torch.from_numpy(mask.astype(np.float32))[None], side, mode="nearest")
        mask = (m[0].numpy() > 0.5).astype(np.uint8)
    return img, mask


@dataclass
class LesionData:
    """Decoded images (N, H, W, 3) uint8, masks (N, H, W) {0,1}, metadata and labels."""

    images: np.ndarray
    masks: np.ndarray
    labels: np.ndarray
    metadata: np.ndarray
    alpha: np.ndarray
    classes: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "LesionData":
        idx = np.asarray(indices, dtype=np.int64)
        return LesionData(self.images[idx], self.masks[idx], self.labels[idx], self.metadata[idx],
                          self.alpha[idx], self.classes)


def load_data(manifest: Manifest, side: int, site_vocab=HAM10000_SITES, workers: int | None = None) -> LesionData:
    """Decode every record, in manifest order regardless of worker completion order."""
    workers = workers or num_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pairs = list(pool.map(lambda r: _load_pair(r, side), manifest.records))
    meta = [encode_metadata(r, site_vocab) for r in manifest.records]
    n = len(manifest)
    images = np.stack([p[0] for p in pairs]) if n else np.zeros((0, side, side, 3), np.uint8)
    masks = np.stack([p[1] for p in pairs]) if n else np.zeros((0, side, side), np.uint8)
    return LesionData(
        images, masks, manifest.labels(),
        np.stack([m.features for m in meta]) if n else np.zeros((0, metadata_dim(site_vocab)), np.float32),
        np.array([m.alpha for m in meta], dtype=np.float32),
        list(manifest.classes),
    )


@dataclass
class SampleBatch:
    original: torch.Tensor
    segmented: torch.Tensor
    masks: torch.Tensor
    metadata: torch.Tensor
    alpha: torch.Tensor
    labels: torch.Tensor


def make_batch(data: LesionData, indices, aug_seeds=None, segment_masks: np.ndarray | None = None) -> SampleBatch:
    """Assemble a normalised batch; ``aug_seeds`` (one per index) switches on augmentation.

    ``segment_masks`` overrides the masks used to build the segmented stream
    (e.g. masks predicted by the segmentation net).
    """
    idx = np.asarray(indices, dtype=np.int64)
    images = torch.from_numpy(data.images[idx].astype(np.float32) / 255.0).permute(0, 3, 1, 2)
    masks = torch.from_numpy(data.masks[idx].astype(np.float32))[:, None]
    seg_masks = masks if segment_masks is None else torch.from_numpy(segment_masks[idx].astype(np.float32))[:, None]
    if aug_seeds is not None:
        params = [sample_augment_params(np.random.default_rng(int(s))) for s in aug_seeds]
        stacked = torch.cat([masks, seg_masks], dim=1)
        images, stacked = augment_batch(images.contiguous(), stacked, params)
        masks, seg_masks = stacked[:, :1], stacked[:, 1:]
    segmented = apply_mask(images, seg_masks[:, 0])
    return SampleBatch(
        normalize(images), normalize(segmented), masks,
        torch.from_numpy(data.metadata[idx]), torch.from_numpy(data.alpha[idx]),
        torch.from_numpy(data.labels[idx]),
    )

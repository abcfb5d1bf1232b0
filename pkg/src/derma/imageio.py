"""Read/write 8-bit images: binary PPM/PGM natively, PNG through Pillow."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_netpbm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: only binary PGM (P5) and PPM (P6) are supported, got {magic!r}")
    w, pos = _read_token(data, pos)
    h, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    if int(maxval) != 255:
        raise ValueError(f"{path}: only 8-bit netpbm files are supported")
    w, h = int(w), int(h)
    channels = 3 if magic == b"P6" else 1
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos + 1)
    return body.reshape(h, w, 3) if channels == 3 else body.reshape(h, w)


def write_netpbm(path: str | Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write image of shape {image.shape} as netpbm")
    h, w = image.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + image.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """uint8 array, (H, W, 3) for colour or (H, W) for grey."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_netpbm(path)
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB") if im.mode in ("RGBA", "P", "CMYK") else im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        write_netpbm(path, image)
        return
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)

"""Checkpoint container: a JSON header followed by raw little-endian arrays.

Layout::

    b"DRMCKPT1" | uint32 LE header length | header (UTF-8 JSON) | array bytes

The header holds ``kind``, ``config``, free-form ``extra`` and a ``tensors``
list of ``{name, dtype, shape, offset, nbytes}`` with offsets relative to the
start of the array section.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DRMCKPT1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1"}


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor | np.ndarray], kind: str,
                    config: dict, extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        if arr.dtype.name not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[arr.dtype.name])).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "extra": extra or {}, "tensors": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (header, name -> tensor)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n].decode())
    base = 12 + n
    tensors = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(_DTYPES[e["dtype"]])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]))
    return header, tensors

"""SSCK checkpoint files.

Layout (little-endian)::

    b"SSCK" | u32 version | u32 config length | config text (utf-8)
    | u32 tensor count
    | per tensor: u16 name length | name | u8 ndim | ndim x u32 extents | float64 payload

Optimizer moments follow the parameters with ``.m1`` / ``.m2`` name suffixes;
training counters are stored as one-element tensors under ``__train__.*``.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError, TruncationError

MAGIC = b"SSCK"
VERSION = 1


def save_checkpoint(path: str, config_text: str, tensors: Dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncationError(f"file ends inside {what}", len(self.blob))
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> Tuple[str, "OrderedDict[str, np.ndarray]"]:
    """Return ``(config_text, tensors)`` in file order."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an SSCK checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n_cfg,) = r.unpack("<I", "config length")
    config_text = r.take(n_cfg, "config text").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        shape = r.unpack(f"<{ndim}I", f"extents of {name}")
        size = int(np.prod(shape)) * 8
        data = r.take(size, f"payload of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return config_text, tensors

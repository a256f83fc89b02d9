"""Versioned binary checkpoint with named parameter blocks.

Layout (little-endian)::

    magic "MOVC" | version u32 | meta_len u32 | meta JSON (utf-8) | n_params u32
    per parameter: name_len u16 | name | dtype u8 (0=f32, 1=f64) | ndim u8 | dims u32 * ndim | raw data

The metadata JSON carries the ViT configuration under ``"vit"`` plus any
extra run information.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .memory import FormatError
from .tensor import Tensor
from .vit import ViTConfig

MAGIC = b"MOVC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(path, cfg: ViTConfig, params: dict[str, Tensor], meta: dict | None = None) -> None:
    header = json.dumps({"vit": cfg.to_dict(), **(meta or {})}, sort_keys=True).encode()
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(header)), header, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[ViTConfig, dict[str, Tensor], dict]:
    """Returns ``(config, params, meta)``."""
    r = _Reader(Path(path).read_bytes())
    magic, version, meta_len = r.unpack("<4sII", "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
        cfg = ViTConfig(**meta.pop("vit"))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid metadata: {exc}", at) from None
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        at = r.pos
        (name_len,) = r.unpack("<H", "parameter name length")
        name = r.take(name_len, "parameter name").decode()
        code, ndim = r.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", at)
        shape = r.unpack(f"<{ndim}I", f"shape of {name!r}")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(r.take(nbytes, f"data of {name!r}"), dtype=dtype).reshape(shape)
        params[name] = Tensor(data.astype(dtype.newbyteorder("="), copy=True), requires_grad=True)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes", r.pos)
    return cfg, params, meta

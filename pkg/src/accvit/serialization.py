"""Binary weight files.

Layout (little-endian, no padding)::

    b"ACCV" | u32 version=1 | u16 len + UTF-8 variant | u32 tensor count
    per tensor: u16 len + UTF-8 name | u8 ndim | u32 dims[ndim] | f32 payload

The whole file is indexed and its length checked before any payload is read.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, ShapeMismatch, TruncatedFile, VersionMismatch
from .nn import Module

MAGIC = b"ACCV"
VERSION = 1


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple
    offset: int  # payload byte offset

    @property
    def nbytes(self) -> int:
        return 4 * int(np.prod(self.shape, dtype=np.int64))


def encode(variant: str, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    vb = variant.encode("utf-8")
    parts += [struct.pack("<H", len(vb)), vb, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def index(buf: bytes) -> tuple[str, list[Entry]]:
    """Parse headers, skip payloads, and verify the total length."""
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"not a weight file (magic {bytes(buf[:4])!r})")
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    (n,) = r.unpack("<H", "variant name length")
    variant = r.take(n, "variant name").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for i in range(count):
        (n,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(n, f"tensor {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{ndim}I", f"{name} dims")
        e = Entry(name, tuple(shape), r.pos)
        r.take(e.nbytes, f"{name} payload")
        entries.append(e)
    if r.pos != len(buf):
        raise TruncatedFile(f"{len(buf) - r.pos} unexpected trailing bytes")
    return variant, entries


def save_weights(model: Module, path) -> None:
    """Write all parameters as float32, atomically replacing ``path``."""
    variant = getattr(getattr(model, "config", None), "name", "")
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    data = encode(variant, tensors)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_weights(model: Module, path) -> str:
    """Fill ``model`` from ``path``; returns the variant name stored in the file.

    Every name and shape is checked before any parameter is touched, so a
    rejected file leaves the model unchanged.
    """
    buf = Path(path).read_bytes()
    variant, entries = index(buf)
    params = list(model.named_parameters())
    for i in range(max(len(entries), len(params))):
        if i >= len(entries):
            raise ShapeMismatch(f"{params[i][0]}: missing from file")
        if i >= len(params):
            raise ShapeMismatch(f"{entries[i].name}: not present in model")
        e, (name, p) = entries[i], params[i]
        if e.name != name:
            raise ShapeMismatch(f"{name}: file has {e.name!r} at this position")
        if e.shape != p.shape:
            raise ShapeMismatch(f"{name}: file shape {e.shape}, model shape {p.shape}")
    for e, (_, p) in zip(entries, params):
        arr = np.frombuffer(buf, dtype="<f4", count=e.nbytes // 4, offset=e.offset)
        p.data = arr.reshape(e.shape).astype(p.dtype)
        p.grad = None
    return variant

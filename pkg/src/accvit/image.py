"""Binary PPM (P6, 8-bit) input and image preprocessing."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import BadImage

MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_HEADER = re.compile(rb"P6(?:\s+|#[^\n]*\n)+?(\d+)(?:\s+|#[^\n]*\n)+?(\d+)(?:\s+|#[^\n]*\n)+?(\d+)\s")


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a P6 file into a ``[h, w, 3]`` uint8 array."""
    m = _HEADER.match(buf)
    if m is None:
        raise BadImage("not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in m.groups())
    if w < 1 or h < 1:
        raise BadImage(f"invalid image size {w}x{h}")
    if maxval != 255:
        raise BadImage(f"only 8-bit PPM is supported, maxval={maxval}")
    need = w * h * 3
    body = buf[m.end():]
    if len(body) < need:
        raise BadImage(f"truncated pixel data: {len(body)} of {need} bytes")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(h, w, 3)


def read_ppm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise BadImage(f"cannot read {path}: {exc.strerror}") from exc
    return decode_ppm(buf)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows[:, None], cols[None, :]]


def preprocess(img: np.ndarray, size: int) -> np.ndarray:
    """uint8 ``[h, w, 3]`` → standardized float32 ``[1, 3, size, size]``."""
    x = resize_nearest(img, size).astype(np.float32) / 255.0
    x = (x - MEAN) / STD
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])

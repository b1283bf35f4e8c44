"""Atomic file writes and 8-bit/16-bit image export."""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def quantize8(image: np.ndarray) -> np.ndarray:
    """Round a [0,1] CHW float image to uint8 HWC."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0) if arr.ndim == 3 else arr


def dequantize8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1) if arr.ndim == 3 else arr


def save_png(path, image: np.ndarray) -> None:
    import io as _io

    buf = _io.BytesIO()
    Image.fromarray(quantize8(image)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return dequantize8(np.asarray(im.convert("RGB")))


def save_pgm16(path, image: np.ndarray) -> dict:
    """Write a 2-D array as binary 16-bit PGM, min-max scaled.

    Returns the scale record needed to map the stored integers back to the
    original values: ``value = lo + stored / 65535 * (hi - lo)``.
    """
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    scaled = np.zeros_like(img) if span == 0 else (img - lo) / span
    q = np.rint(scaled * 65535).astype(">u2")
    h, w = img.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())
    return {"min": lo, "max": hi, "maxval": 65535}


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def load_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    # exactly one whitespace byte separates the header from the raster
    raw = data[m.end() :]
    if len(raw) < w * h * 2:
        raise ValueError(f"{path}: truncated raster")
    return np.frombuffer(raw[: w * h * 2], dtype=">u2").reshape(h, w).astype(np.float64) / maxval

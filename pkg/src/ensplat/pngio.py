"""8-bit PNG I/O for float framebuffers."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_bytes(img: np.ndarray) -> bytes:
    """Encode an HxWx3 float image in [0,1] as deterministic PNG bytes."""
    u8 = np.clip(np.asarray(img), 0.0, 1.0)
    u8 = np.round(u8 * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(path, img: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(img))


def load_png(path) -> np.ndarray:
    """Load as float in [0,1] via exact /255 division."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def from_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_raw_f32(path, img: np.ndarray) -> None:
    """Raw little-endian float32 dump (H, W, 3), row-major."""
    np.ascontiguousarray(img, dtype="<f4").tofile(path)

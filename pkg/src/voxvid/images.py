"""Image I/O: 8-bit PNG for color, 32-bit PFM for float channels."""

from __future__ import annotations

import numpy as np
from PIL import Image

__all__ = ["save_png", "load_png", "save_pfm", "load_pfm"]


def save_png(path, arr: np.ndarray):
    """Write a float image in [0, 1] (HxW or HxWx3) as 8-bit PNG."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(a * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG as float32 in [0, 1]; RGB kept, palettes expanded."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if img.mode in ("P", "RGBA", "CMYK") else "L")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_pfm(path, arr: np.ndarray):
    """Write float32 PFM (little-endian, rows stored bottom-up)."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    elif a.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM expects HxW or HxWx3, got {a.shape}")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{a.shape[1]} {a.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(a[::-1], dtype="<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: header {kind!r}")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
        if data.size != count:
            raise ValueError("truncated PFM payload")
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    out = data.reshape(shape)[::-1].astype(np.float32)
    if abs(scale) not in (0.0, 1.0):
        out = out * abs(scale)
    return np.ascontiguousarray(out)

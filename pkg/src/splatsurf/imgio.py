"""Image output: 8-bit PNG, float PFM maps, normal-map previews."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path: str, image: np.ndarray):
    """Write [0,1] float RGB or grayscale as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_pfm(path: str, data: np.ndarray):
    """Write a float32 PFM (grayscale 'Pf' or color 'PF'), little-endian."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3, got {arr.shape}")
    with open(path, "wb") as f:
        f.write(f"{header}\n{arr.shape[1]} {arr.shape[0]}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(arr).tobytes())   # PFM rows run bottom to top


def load_pfm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: {header!r}")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        ch = 3 if header == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(f.read(4 * w * h * ch), dtype=dt)
    arr = arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)
    return np.flipud(arr).astype(np.float64)


def save_normal_png(path: str, normals: np.ndarray):
    """Preview a unit-normal map as (n + 1) / 2 in 8-bit RGB."""
    save_png(path, (np.asarray(normals) + 1.0) * 0.5)

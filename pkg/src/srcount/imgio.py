"""8-bit raster I/O and array/tensor layout conversions.

Images travel through the package as float64 (H, W, C) arrays in [0, 1] with
C of 1 (grayscale) or 3 (RGB); model inputs are (1, C, H, W) arrays.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

__all__ = ["load_image", "save_image", "image_to_nchw", "nchw_to_image", "match_channels"]


def load_image(path) -> np.ndarray:
    """Read an 8-bit raster file as (H, W, C) float64 in [0, 1]."""
    with PILImage.open(path) as img:
        if img.mode in ("L", "I", "I;16"):
            img = img.convert("L")
        elif img.mode != "RGB":
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(arr: np.ndarray, path) -> None:
    """Quantize a [0, 1] float image to 8 bits and write it (format by suffix)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {arr.shape}")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        img = PILImage.fromarray(data[:, :, 0], mode="L")
    else:
        img = PILImage.fromarray(data, mode="RGB")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def image_to_nchw(arr: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (1, C, H, W)."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)[None, :, :, :])


def nchw_to_image(t: np.ndarray) -> np.ndarray:
    """(1, C, H, W) -> (H, W, C)."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError(f"expected a single-image (1, C, H, W) array, got shape {t.shape}")
    return np.ascontiguousarray(t[0].transpose(1, 2, 0))


def match_channels(arr: np.ndarray, channels: int) -> np.ndarray:
    """Replicate grayscale up or average RGB down so the image has `channels`."""
    if arr.shape[2] == channels:
        return arr
    if arr.shape[2] == 1:
        return np.repeat(arr, channels, axis=2)
    if channels == 1:
        return arr.mean(axis=2, keepdims=True)
    raise ValueError(f"cannot convert {arr.shape[2]}-channel image to {channels} channels")

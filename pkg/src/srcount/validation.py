"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .density import AnnotationSet
from .model import COUNTING_STRIDE

__all__ = ["as_image_list", "as_annotation_list", "as_count_array"]


def as_image_list(X, name: str = "X") -> list[np.ndarray]:
    """Coerce X into a list of (H, W, C) float64 images in [0, 1].

    Accepts a single stacked array (N, H, W[, C]) or a sequence of per-image
    arrays (H, W[, C]); extents must be divisible by the counting stride.
    """
    if isinstance(X, np.ndarray) and X.ndim in (3, 4):
        items = list(X)
    else:
        try:
            items = list(X)
        except TypeError:
            raise ValueError(f"{name} must be an array or a sequence of images") from None
    if not items:
        raise ValueError(f"{name} contains no images")
    images = []
    for i, item in enumerate(items):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"{name}[{i}]: expected (H, W) or (H, W, 1|3), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name}[{i}]: contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"{name}[{i}]: pixel values must lie in [0, 1]")
        h, w = arr.shape[:2]
        if h % COUNTING_STRIDE or w % COUNTING_STRIDE:
            raise ValueError(
                f"{name}[{i}]: extents {h}x{w} must be divisible by {COUNTING_STRIDE}"
            )
        images.append(arr)
    return images


def as_annotation_list(y, images: list[np.ndarray]) -> list[AnnotationSet]:
    """Coerce y into one AnnotationSet per image (y holds (k, 2) point arrays)."""
    try:
        items = list(y)
    except TypeError:
        raise ValueError("y must be a sequence of (k, 2) point arrays") from None
    if len(items) != len(images):
        raise ValueError(f"y has {len(items)} entries for {len(images)} images")
    anns = []
    for i, (pts, img) in enumerate(zip(items, images)):
        h, w = img.shape[:2]
        try:
            anns.append(AnnotationSet(points=np.asarray(pts, dtype=np.float64), height=h, width=w))
        except ValueError as exc:
            raise ValueError(f"y[{i}]: {exc}") from None
    return anns


def as_count_array(y) -> np.ndarray:
    """Ground-truth counts from either scalar counts or point arrays."""
    counts = []
    for item in y:
        arr = np.asarray(item, dtype=np.float64)
        counts.append(float(arr) if arr.ndim == 0 else float(len(arr)))
    return np.asarray(counts)

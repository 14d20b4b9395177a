"""Head-point annotations and Gaussian density-map targets.

A density map is a plain 2-d float64 array whose cell sum is the crowd count.
Each annotated point contributes a truncated, renormalized Gaussian, so the
sum equals the point count regardless of border clipping.  All functions are
pure; generating maps for many images concurrently is safe.

Annotation records serialize as JSON objects with fields "image", "height",
"width", "points" (a list of [x, y] pairs, pixel coordinates, x < width and
y < height).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AnnotationSet",
    "generate_density_map",
    "rescale_points",
    "downsample_density",
    "integrate",
    "read_annotations",
    "write_annotations",
]

DEFAULT_SIGMA = 4.0


@dataclass(eq=False)
class AnnotationSet:
    """Head centers (x, y) in the pixel frame of one image."""

    points: np.ndarray
    height: int
    width: int
    image: str = ""

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 2))
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be (k, 2), got shape {pts.shape}")
        self.points = pts
        for i, (x, y) in enumerate(pts):
            if not (0.0 <= x < self.width and 0.0 <= y < self.height):
                raise ValueError(
                    f"point {i} at ({x}, {y}) lies outside the "
                    f"{self.height}x{self.width} frame"
                )

    def count(self) -> int:
        return len(self.points)

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "height": int(self.height),
            "width": int(self.width),
            "points": [[float(x), float(y)] for x, y in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationSet":
        return cls(
            points=np.asarray(d["points"], dtype=np.float64),
            height=int(d["height"]),
            width=int(d["width"]),
            image=str(d.get("image", "")),
        )

    def flipped_horizontal(self) -> "AnnotationSet":
        """Mirror points left-right (x -> width - x, boundary clamped inward)."""
        pts = self.points.copy()
        if len(pts):
            pts[:, 0] = np.minimum(self.width - pts[:, 0], self.width - 0.5)
        return AnnotationSet(pts, self.height, self.width, self.image)


def rescale_points(ann: AnnotationSet, factor_h: float, factor_w: float) -> AnnotationSet:
    """Scale the frame and every point; boundary landings clamp half a cell in."""
    if factor_h <= 0 or factor_w <= 0:
        raise ValueError(f"scale factors must be positive, got ({factor_h}, {factor_w})")
    new_h = max(1, int(round(ann.height * factor_h)))
    new_w = max(1, int(round(ann.width * factor_w)))
    pts = ann.points.copy()
    if len(pts):
        pts[:, 0] = np.minimum(pts[:, 0] * factor_w, new_w - 0.5)
        pts[:, 1] = np.minimum(pts[:, 1] * factor_h, new_h - 0.5)
    return AnnotationSet(pts, new_h, new_w, ann.image)


def generate_density_map(
    ann: AnnotationSet,
    out_shape: tuple[int, int] | None = None,
    sigma: float = DEFAULT_SIGMA,
    radius: int | None = None,
) -> np.ndarray:
    """Sum of per-point Gaussians, each renormalized to unit cell-sum.

    The kernel has std ``sigma`` (cells) and is truncated at ``radius`` cells
    (default ceil(4 * sigma)) around the cell containing the point; truncation
    at the border removes mass before renormalization, so the map's sum is
    always exactly the point count (up to accumulation error).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = ann.height, ann.width
    if out_shape is not None and tuple(out_shape) != (h, w):
        raise ValueError(f"out_shape {tuple(out_shape)} does not match frame ({h}, {w})")
    rad = int(radius) if radius is not None else int(math.ceil(4.0 * sigma))
    if rad < 1:
        raise ValueError(f"radius must be a positive integer, got {rad}")

    dm = np.zeros((h, w))
    if ann.count() == 0:
        return dm
    ax = np.arange(-rad, rad + 1, dtype=np.float64)
    base = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    base_interior = base / base.sum()

    for x, y in ann.points:
        cy, cx = int(math.floor(y)), int(math.floor(x))
        r0, r1 = max(cy - rad, 0), min(cy + rad, h - 1)
        c0, c1 = max(cx - rad, 0), min(cx + rad, w - 1)
        window = base[r0 - cy + rad : r1 - cy + rad + 1, c0 - cx + rad : c1 - cx + rad + 1]
        if window.shape == base.shape:
            dm[r0 : r1 + 1, c0 : c1 + 1] += base_interior
        else:
            dm[r0 : r1 + 1, c0 : c1 + 1] += window / window.sum()
    return dm


def downsample_density(dm: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum pooling by an integer factor; the total sum is preserved."""
    if factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    h, w = dm.shape
    if h % factor != 0 or w % factor != 0:
        raise ValueError(f"extents {h}x{w} not divisible by factor {factor}")
    return dm.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))


def integrate(dm: np.ndarray) -> float:
    """Cell sum of a density map, i.e. the predicted or ground-truth count."""
    return float(np.sum(dm))


def read_annotations(path) -> list[AnnotationSet]:
    """Load one record or a list of records from a JSON annotation file."""
    data = json.loads(Path(path).read_text())
    records = data if isinstance(data, list) else [data]
    return [AnnotationSet.from_dict(r) for r in records]


def write_annotations(annotations, path) -> None:
    """Write a single record (dict) or a list of records as JSON."""
    if isinstance(annotations, AnnotationSet):
        payload = annotations.to_dict()
    else:
        payload = [a.to_dict() for a in annotations]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

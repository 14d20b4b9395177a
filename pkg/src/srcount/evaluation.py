"""Counting metrics and batch evaluation over a dataset split.

MAE = mean |pred - gt|; RMSE = sqrt(mean |pred - gt|^2) over per-image counts.
Predicted counts stay fractional.  Per-image evaluation is independent;
report rows are ordered by image id so repeated runs are identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .density import integrate, read_annotations
from .imgio import image_to_nchw, load_image, match_channels
from .model import ModelParameters, forward_counting

__all__ = [
    "mae",
    "rmse",
    "predict_density",
    "predict_count",
    "EvalRow",
    "EvalReport",
    "evaluate",
    "evaluate_pairs",
]


def _check_lengths(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim != 1 or g.ndim != 1:
        raise ValueError("pred and gt must be 1-d sequences")
    if len(p) != len(g):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(g)} ground truths")
    if len(p) == 0:
        raise ValueError("cannot compute a metric over zero images")
    return p, g


def mae(pred, gt) -> float:
    p, g = _check_lengths(pred, gt)
    return float(np.mean(np.abs(p - g)))


def rmse(pred, gt) -> float:
    p, g = _check_lengths(pred, gt)
    return float(math.sqrt(np.mean(np.abs(p - g) ** 2)))


def predict_density(params: ModelParameters, image: np.ndarray) -> np.ndarray:
    """Density grid (H/8, W/8) for a single (H, W, C) image in [0, 1]."""
    x = Tensor(image_to_nchw(match_channels(np.asarray(image, dtype=np.float64), params.spec.in_channels)))
    return forward_counting(params, x).data[0, 0]


def predict_count(params: ModelParameters, image: np.ndarray) -> float:
    return integrate(predict_density(params, image))


@dataclass
class EvalRow:
    id: str
    gt_count: float
    predicted: float | None = None
    abs_error: float | None = None
    error: str | None = None  # set when the image could not be evaluated

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "gt_count": self.gt_count,
            "predicted": self.predicted,
            "abs_error": self.abs_error,
            "error": self.error,
        }


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mae: float | None
    rmse: float | None
    n_images: int
    n_failed: int

    @classmethod
    def from_rows(cls, rows: list[EvalRow]) -> "EvalReport":
        ok = [r for r in rows if r.error is None]
        preds = [r.predicted for r in ok]
        gts = [r.gt_count for r in ok]
        return cls(
            rows=rows,
            mae=mae(preds, gts) if ok else None,
            rmse=rmse(preds, gts) if ok else None,
            n_images=len(ok),
            n_failed=len(rows) - len(ok),
        )

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "n_images": self.n_images,
            "n_failed": self.n_failed,
            "rows": [r.to_dict() for r in self.rows],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_pairs(params: ModelParameters, items) -> EvalReport:
    """Evaluate (id, image, gt_count) triples already in memory."""
    rows = []
    for image_id, image, gt_count in items:
        pred = predict_count(params, image)
        rows.append(
            EvalRow(id=image_id, gt_count=float(gt_count), predicted=pred, abs_error=abs(pred - gt_count))
        )
    rows.sort(key=lambda r: r.id)
    return EvalReport.from_rows(rows)


def evaluate(params: ModelParameters, manifest, split: str = "test", input_scale: int = 4) -> EvalReport:
    """Predict counts for every image in a split and aggregate MAE/RMSE.

    Unreadable images become flagged failure rows and are excluded from the
    aggregates.
    """
    rows = []
    for entry in manifest.entries_for(split):
        if input_scale == 1:
            img_path = manifest.root / entry.hr_path
            ann_path = manifest.root / entry.annotation_paths["hr"]
        else:
            img_path = manifest.root / entry.lr_paths[input_scale]
            ann_path = manifest.root / entry.annotation_paths[str(input_scale)]
        gt_count = float(read_annotations(ann_path)[0].count())
        try:
            pred = predict_count(params, load_image(img_path))
        except OSError as exc:
            rows.append(EvalRow(id=entry.id, gt_count=gt_count, error=str(exc)))
            continue
        rows.append(
            EvalRow(id=entry.id, gt_count=gt_count, predicted=pred, abs_error=abs(pred - gt_count))
        )
    rows.sort(key=lambda r: r.id)
    return EvalReport.from_rows(rows)

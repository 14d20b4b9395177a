"""Scikit-learn style estimator wrapping the counting network.

``CrowdCounter.fit(X, y)`` trains on images X (values in [0, 1], extents
divisible by 8) with per-image head-point arrays y; ``predict`` returns
fractional crowd counts.  With ``alpha > 0`` the auxiliary super-resolution
loss is enabled and ``fit`` additionally needs ``hr_images`` at ``sr_scale``
times the input extents.  The trained parameters keep the SR head attached;
call ``detach_sr_head(est.params_)`` for a deployment copy with identical
predictions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .evaluation import mae, predict_count, predict_density
from .model import ModelSpec, init_parameters
from .training import TrainConfig, TrainSample, train
from .validation import as_annotation_list, as_count_array, as_image_list

__all__ = ["CrowdCounter"]


class CrowdCounter(BaseEstimator):
    """Density-regression crowd counter with an optional SR auxiliary task."""

    def __init__(
        self,
        stage_widths=(16, 32, 64, 64, 64),
        stage_convs=(2, 2, 2, 2, 2),
        fusion_stages=(3, 4, 5),
        head_width=64,
        sr_scale=2,
        sr_out_channels=3,
        alpha=1.0,
        lr=1e-5,
        epochs=500,
        flip_prob=0.5,
        batch_size=1,
        sigma=4.0,
        radius=None,
        seed=0,
    ):
        self.stage_widths = stage_widths
        self.stage_convs = stage_convs
        self.fusion_stages = fusion_stages
        self.head_width = head_width
        self.sr_scale = sr_scale
        self.sr_out_channels = sr_out_channels
        self.alpha = alpha
        self.lr = lr
        self.epochs = epochs
        self.flip_prob = flip_prob
        self.batch_size = batch_size
        self.sigma = sigma
        self.radius = radius
        self.seed = seed

    def _spec(self, in_channels: int) -> ModelSpec:
        return ModelSpec(
            in_channels=in_channels,
            stage_widths=tuple(self.stage_widths),
            stage_convs=tuple(self.stage_convs),
            fusion_stages=tuple(self.fusion_stages),
            head_width=self.head_width,
            sr_scale=self.sr_scale,
            sr_out_channels=self.sr_out_channels,
        )

    def fit(self, X, y, hr_images=None):
        images = as_image_list(X)
        anns = as_annotation_list(y, images)
        targets: list[np.ndarray | None] = [None] * len(images)
        if self.alpha > 0:
            if hr_images is None:
                raise ValueError(
                    "alpha > 0 enables the super-resolution loss and requires hr_images "
                    "(or set alpha=0 for counting-only training)"
                )
            targets = as_image_list(hr_images, name="hr_images")
            if len(targets) != len(images):
                raise ValueError(f"hr_images has {len(targets)} entries for {len(images)} images")

        spec = self._spec(images[0].shape[2])
        params = init_parameters(spec, seed=self.seed)
        samples = [
            TrainSample(image=img, ann=ann, sr_target=tgt, id=str(i))
            for i, (img, ann, tgt) in enumerate(zip(images, anns, targets))
        ]
        cfg = TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            alpha=self.alpha,
            flip_prob=self.flip_prob,
            seed=self.seed,
            batch_size=self.batch_size,
            sigma=self.sigma,
            radius=self.radius,
        )
        self.history_ = train(params, samples, cfg)
        self.params_ = params
        self.n_features_in_ = images[0].shape[2]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this CrowdCounter instance is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """Fractional crowd count per image."""
        self._check_fitted()
        return np.asarray([predict_count(self.params_, img) for img in as_image_list(X)])

    def predict_density(self, X) -> list[np.ndarray]:
        """Per-image density grids at 1/8 of the input extents."""
        self._check_fitted()
        return [predict_density(self.params_, img) for img in as_image_list(X)]

    def score(self, X, y) -> float:
        """Negative MAE (higher is better), y as counts or point arrays."""
        preds = self.predict(X)
        return -mae(preds, as_count_array(y))

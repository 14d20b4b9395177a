"""Joint optimization of the counting loss and the auxiliary SR loss.

Per step: draw the sample, flip image/points/SR-target together with
probability ``flip_prob``, build the ground-truth density map at input
resolution, block-sum it down to the counting head's 1/8 grid, run the
forward pass(es), and take one Adam step on ``ld + alpha * le``.  With
``alpha == 0`` the SR head is neither run nor optimized, so the counting
trajectory is bit-identical to a counting-only setup.

The loop is sequential and deterministic under ``seed``.  The per-epoch log
records (epoch, step, ld, le, total, mae_val, wall_ms); all fields except
wall_ms are reproducible.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, add, backward, mse, record, scale
from .density import AnnotationSet, downsample_density, generate_density_map
from .errors import DetachedHeadError, ShapeError, TrainingDivergedError
from .evaluation import mae as mae_metric
from .evaluation import predict_count
from .imgio import image_to_nchw, load_image, match_channels
from .model import COUNTING_STRIDE, ModelParameters, forward_counting, forward_joint, save_checkpoint
from .optim import AdamState, adam_step

__all__ = [
    "TrainConfig",
    "TrainSample",
    "loss_density",
    "loss_sr",
    "total_loss",
    "train",
    "samples_from_manifest",
]

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 500
    alpha: float = 1.0
    flip_prob: float = 0.5
    seed: int = 0
    batch_size: int = 1
    sigma: float = 4.0
    radius: int | None = None
    input_scale: int = 4
    checkpoint_every: int = 0  # epochs between checkpoint saves; 0 = final only

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")


@dataclass
class TrainSample:
    """One training item: input image, its annotations, optional SR target."""

    image: np.ndarray  # (H, W, C) in [0, 1]
    ann: AnnotationSet
    sr_target: np.ndarray | None = None  # (H * sr_scale, W * sr_scale, C)
    id: str = ""


def loss_density(pred: Tensor, gt: Tensor) -> Tensor:
    """Squared-norm counting loss: sum over cells of (pred - gt)^2 / (2 N_b)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"loss_density: shapes disagree, {pred.shape} vs {gt.shape}")
    n_b = pred.shape[0]
    return scale(mse(pred, gt), pred.numel / (2.0 * n_b))


def loss_sr(sr_pred: Tensor, hr: Tensor) -> Tensor:
    """Same 1/(2 N_b) squared-norm form, between SR output and HR target."""
    if sr_pred.shape != hr.shape:
        raise ShapeError(f"loss_sr: shapes disagree, {sr_pred.shape} vs {hr.shape}")
    n_b = sr_pred.shape[0]
    return scale(mse(sr_pred, hr), sr_pred.numel / (2.0 * n_b))


def total_loss(ld: Tensor, le: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return add(ld, scale(le, alpha))


def _step_arrays(sample: TrainSample, flip: bool, spec, cfg: TrainConfig):
    img, ann, tgt = sample.image, sample.ann, sample.sr_target
    if flip:
        img = img[:, ::-1, :]
        ann = ann.flipped_horizontal()
        if tgt is not None:
            tgt = tgt[:, ::-1, :]
    gt = downsample_density(
        generate_density_map(ann, sigma=cfg.sigma, radius=cfg.radius), COUNTING_STRIDE
    )
    x = image_to_nchw(match_channels(img, spec.in_channels))
    t = None
    if tgt is not None:
        t = image_to_nchw(match_channels(tgt, spec.sr_out_channels))
    return x, gt[None, None, :, :], t


def _check_sample(sample: TrainSample, spec, use_sr: bool) -> None:
    h, w = sample.image.shape[:2]
    if h % COUNTING_STRIDE or w % COUNTING_STRIDE:
        raise ShapeError(
            f"sample '{sample.id}': extents {h}x{w} not divisible by {COUNTING_STRIDE}"
        )
    if (sample.ann.height, sample.ann.width) != (h, w):
        raise ShapeError(
            f"sample '{sample.id}': annotation frame {sample.ann.height}x{sample.ann.width} "
            f"does not match image extents {h}x{w}"
        )
    if use_sr:
        if sample.sr_target is None:
            raise ValueError(f"sample '{sample.id}': alpha > 0 requires an SR target image")
        th, tw = sample.sr_target.shape[:2]
        if (th, tw) != (h * spec.sr_scale, w * spec.sr_scale):
            raise ShapeError(
                f"sample '{sample.id}': SR target {th}x{tw} is not sr_scale={spec.sr_scale} "
                f"times the {h}x{w} input"
            )


def train(
    params: ModelParameters,
    samples: list[TrainSample],
    cfg: TrainConfig,
    val_samples: list[TrainSample] = (),
    log_path=None,
    checkpoint_path=None,
) -> list[dict]:
    """Optimize in place; returns the per-epoch log as a list of records."""
    spec = params.spec
    use_sr = cfg.alpha > 0
    if use_sr and not params.has_sr_head:
        raise DetachedHeadError("alpha > 0 requires the super-resolution head to be attached")
    for s in samples:
        _check_sample(s, spec, use_sr)

    trainable = dict(params.counting())
    if use_sr:
        trainable.update(params.sr_head())

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    records: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    gstep = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.monotonic()
            order = rng.permutation(len(samples))
            ld_sum = le_sum = total_sum = 0.0
            n_steps = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start : start + cfg.batch_size]]
                flips = rng.random(len(batch)) < cfg.flip_prob
                prepared = [_step_arrays(s, bool(f), spec, cfg) for s, f in zip(batch, flips)]
                x = Tensor(np.concatenate([p[0] for p in prepared]))
                gt = Tensor(np.concatenate([p[1] for p in prepared]))
                target = None
                if use_sr:
                    target = Tensor(np.concatenate([p[2] for p in prepared]))

                with record() as rec:
                    for t in trainable.values():
                        rec.watch(t)
                    if use_sr:
                        pred, sr = forward_joint(params, x)
                        ld = loss_density(pred, gt)
                        le = loss_sr(sr, target)
                        total = total_loss(ld, le, cfg.alpha)
                        le_val = le.item()
                    else:
                        pred = forward_counting(params, x)
                        ld = loss_density(pred, gt)
                        total = ld
                        le_val = 0.0
                    ld_val = ld.item()
                    total_val = total.item()
                    for term, value in (("ld", ld_val), ("le", le_val)):
                        if not np.isfinite(value):
                            raise TrainingDivergedError(
                                f"non-finite loss term '{term}' at step {gstep}"
                            )
                    for t in trainable.values():
                        t.grad = None
                    backward(total)
                    adam_step(trainable, state, cfg.lr)

                ld_sum += ld_val
                le_sum += le_val
                total_sum += total_val
                n_steps += 1
                gstep += 1

            mae_val = None
            if val_samples:
                preds = [predict_count(params, s.image) for s in val_samples]
                gts = [float(s.ann.count()) for s in val_samples]
                mae_val = mae_metric(preds, gts)
            rec_out = {
                "epoch": epoch,
                "step": gstep,
                "ld": ld_sum / n_steps,
                "le": le_sum / n_steps,
                "total": total_sum / n_steps,
                "mae_val": mae_val,
                "wall_ms": (time.monotonic() - t0) * 1000.0,
            }
            records.append(rec_out)
            if log_file is not None:
                log_file.write(json.dumps(rec_out) + "\n")
                log_file.flush()
            if (
                checkpoint_path is not None
                and cfg.checkpoint_every > 0
                and (epoch + 1) % cfg.checkpoint_every == 0
            ):
                save_checkpoint(params, checkpoint_path)
            log.debug("epoch %d: ld=%.6g le=%.6g mae_val=%s", epoch, rec_out["ld"], rec_out["le"], mae_val)
    finally:
        if log_file is not None:
            log_file.close()
    return records


def samples_from_manifest(manifest, split: str, input_scale: int = 4, sr_scale: int | None = None):
    """Materialize TrainSamples for one split of a built dataset.

    The input image comes from the ``input_scale`` downsampling; the SR target
    (when ``sr_scale`` is given) is the image at scale input_scale / sr_scale,
    with scale 1 meaning the full-resolution image.
    """
    target_key = None
    if sr_scale is not None:
        if input_scale % sr_scale != 0:
            raise ValueError(f"input_scale {input_scale} not divisible by sr_scale {sr_scale}")
        t = input_scale // sr_scale
        target_key = "hr" if t == 1 else str(t)

    out: list[TrainSample] = []
    for entry in manifest.entries_for(split):
        root = manifest.root
        if input_scale == 1:
            img_path = root / entry.hr_path
            ann_path = root / entry.annotation_paths["hr"]
        else:
            img_path = root / entry.lr_paths[input_scale]
            ann_path = root / entry.annotation_paths[str(input_scale)]
        image = load_image(img_path)
        from .density import read_annotations

        ann = read_annotations(ann_path)[0]
        target = None
        if target_key is not None:
            if target_key == "hr":
                target = load_image(root / entry.hr_path)
            else:
                target = load_image(root / entry.lr_paths[int(target_key)])
        out.append(TrainSample(image=image, ann=ann, sr_target=target, id=entry.id))
    return out

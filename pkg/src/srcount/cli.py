"""Command-line front end: build-dataset, train, eval, infer, render.

Exit codes: 0 success, 1 usage error (bad flags, bad config keys/values),
2 input error (missing or unreadable files), 3 state/shape error (checkpoint
mismatch, detached head, diverged training).  Options may come from a JSON
config file (--config); explicit flags win.  The effective configuration is
echoed to the log before execution.  SRCOUNT_VERBOSITY (debug|info|warning)
controls log output; there is no other environment dependence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw, UnidentifiedImageError

from . import dataset as ds
from .density import integrate
from .errors import (
    CheckpointError,
    DatasetError,
    DetachedHeadError,
    ShapeError,
    TrainingDivergedError,
)
from .evaluation import evaluate, predict_density
from .imgio import load_image
from .model import ModelSpec, init_parameters, load_checkpoint, save_checkpoint
from .training import TrainConfig, samples_from_manifest, train

log = logging.getLogger("srcount")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_STATE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("SRCOUNT_VERBOSITY", "info").lower()
    numeric = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING}.get(
        level, logging.INFO
    )
    logging.basicConfig(level=numeric, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path, known: set[str]) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys {unknown}; known keys: {sorted(known)}")
    return data


def _effective(config: dict, defaults: dict, flags: dict) -> dict:
    merged = dict(defaults)
    merged.update(config)
    merged.update({k: v for k, v in flags.items() if v is not None})
    log.info("effective config: %s", json.dumps(merged, sort_keys=True, default=str))
    return merged


def _parse_scales(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    return tuple(int(s) for s in str(text).split(","))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_BUILD_KEYS = {"long_side", "min_side_threshold", "method", "scales", "test_fraction", "seed"}


def _cmd_build_dataset(args) -> int:
    config = _load_config(args.config, _BUILD_KEYS)
    eff = _effective(
        config,
        {
            "long_side": 2048,
            "min_side_threshold": None,
            "method": "linear",
            "scales": (2, 4),
            "test_fraction": 0.2,
            "seed": 0,
        },
        {
            "long_side": args.long_side,
            "method": args.method,
            "scales": _parse_scales(args.scales) if args.scales else None,
            "test_fraction": args.test_fraction,
            "seed": args.seed,
        },
    )
    build_cfg = ds.BuildConfig(
        long_side=int(eff["long_side"]),
        min_side_threshold=eff["min_side_threshold"],
        method=eff["method"],
        scales=_parse_scales(eff["scales"]),
        test_fraction=float(eff["test_fraction"]),
        seed=int(eff["seed"]),
    )
    manifest = ds.build(args.src_dir, args.ann_file, args.out_dir, build_cfg)
    report = ds.validate(manifest)
    if not report.ok:
        log.error("validation failed: %s", json.dumps(report.failures(), sort_keys=True))
        return EXIT_STATE
    log.info("built %d entries into %s", len(manifest.entries), args.out_dir)
    return EXIT_OK


_TRAIN_KEYS = {
    "alpha",
    "epochs",
    "lr",
    "seed",
    "flip_prob",
    "batch_size",
    "sigma",
    "radius",
    "input_scale",
    "checkpoint_every",
    "sr_scale",
    "sr_out_channels",
    "stage_widths",
    "stage_convs",
    "fusion_stages",
    "head_width",
    "in_channels",
    "preset",
}


def _cmd_train(args) -> int:
    config = _load_config(args.config, _TRAIN_KEYS)
    eff = _effective(
        config,
        {
            "alpha": 1.0,
            "epochs": 500,
            "lr": 1e-5,
            "seed": 0,
            "flip_prob": 0.5,
            "batch_size": 1,
            "sigma": 4.0,
            "radius": None,
            "input_scale": 4,
            "checkpoint_every": 0,
            "sr_scale": 2,
            "sr_out_channels": 3,
            "stage_widths": None,
            "stage_convs": None,
            "fusion_stages": (3, 4, 5),
            "head_width": 64,
            "in_channels": None,
            "preset": "toy",
        },
        {
            "alpha": args.alpha,
            "epochs": args.epochs,
            "lr": args.lr,
            "sr_scale": args.sr_scale,
            "seed": args.seed,
        },
    )
    manifest = ds.DatasetManifest.load(args.manifest)
    cfg = TrainConfig(
        lr=float(eff["lr"]),
        epochs=int(eff["epochs"]),
        alpha=float(eff["alpha"]),
        flip_prob=float(eff["flip_prob"]),
        seed=int(eff["seed"]),
        batch_size=int(eff["batch_size"]),
        sigma=float(eff["sigma"]),
        radius=eff["radius"],
        input_scale=int(eff["input_scale"]),
        checkpoint_every=int(eff["checkpoint_every"]),
    )
    sr_scale = int(eff["sr_scale"])
    train_samples = samples_from_manifest(
        manifest, "train", cfg.input_scale, sr_scale if cfg.alpha > 0 else None
    )
    if not train_samples:
        raise DatasetError(f"{args.manifest}: train split is empty")
    val_samples = samples_from_manifest(manifest, "test", cfg.input_scale, None)

    if eff["preset"] == "vgg16":
        base = ModelSpec.vgg16()
        widths, convs = base.stage_widths, base.stage_convs
    elif eff["preset"] == "toy":
        widths, convs = (16, 32, 64, 64, 64), (2, 2, 2, 2, 2)
    else:
        raise ValueError(f"unknown preset '{eff['preset']}'; expected 'toy' or 'vgg16'")
    if eff["stage_widths"] is not None:
        widths = tuple(eff["stage_widths"])
    if eff["stage_convs"] is not None:
        convs = tuple(eff["stage_convs"])
    in_channels = eff["in_channels"]
    if in_channels is None:
        in_channels = train_samples[0].image.shape[2]
    spec = ModelSpec(
        in_channels=int(in_channels),
        stage_widths=widths,
        stage_convs=convs,
        fusion_stages=tuple(eff["fusion_stages"]),
        head_width=int(eff["head_width"]),
        sr_scale=sr_scale,
        sr_out_channels=int(eff["sr_out_channels"]),
    )
    params = init_parameters(spec, seed=cfg.seed)
    log_path = Path(args.out).with_suffix(".log.jsonl") if args.log is None else args.log
    records = train(
        params,
        train_samples,
        cfg,
        val_samples=val_samples,
        log_path=log_path,
        checkpoint_path=args.out,
    )
    save_checkpoint(params, args.out)
    final = records[-1] if records else {}
    log.info(
        "trained %d epochs; final ld=%s mae_val=%s; checkpoint: %s",
        cfg.epochs,
        final.get("ld"),
        final.get("mae_val"),
        args.out,
    )
    return EXIT_OK


_EVAL_KEYS = {"split", "input_scale"}


def _cmd_eval(args) -> int:
    config = _load_config(args.config, _EVAL_KEYS)
    eff = _effective(
        config,
        {"split": "test", "input_scale": 4},
        {"split": args.split},
    )
    params = load_checkpoint(args.checkpoint)
    manifest = ds.DatasetManifest.load(args.manifest)
    report = evaluate(params, manifest, split=eff["split"], input_scale=int(eff["input_scale"]))
    if args.out is not None:
        report.save(args.out)
    print(
        f"MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  over {report.n_images} images"
        + (f"  ({report.n_failed} failed)" if report.n_failed else "")
        if report.mae is not None
        else f"no evaluable images ({report.n_failed} failed)"
    )
    return EXIT_OK


def _cmd_infer(args) -> int:
    params = load_checkpoint(args.checkpoint)
    density = predict_density(params, load_image(args.image))
    if args.density_out is not None:
        np.save(args.density_out, density)
    print(f"{integrate(density):.3f}")
    return EXIT_OK


# Dark-to-bright heat ramp applied linearly to density / max(density).
_RAMP = np.array(
    [
        [0.001, 0.000, 0.014],
        [0.258, 0.039, 0.406],
        [0.576, 0.149, 0.404],
        [0.865, 0.317, 0.226],
        [0.988, 0.645, 0.040],
        [0.988, 0.998, 0.645],
    ]
)
_MARGIN = 16


def _render_heatmap(density: np.ndarray, out_path) -> None:
    peak = density.max()
    norm = density / peak if peak > 0 else np.zeros_like(density)
    stops = np.linspace(0.0, 1.0, len(_RAMP))
    rgb = np.stack([np.interp(norm, stops, _RAMP[:, c]) for c in range(3)], axis=2)
    body = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = body.shape[:2]
    canvas = np.zeros((h + _MARGIN, w, 3), dtype=np.uint8)
    canvas[:h] = body
    img = PILImage.fromarray(canvas, mode="RGB")
    draw = ImageDraw.Draw(img)
    draw.text((2, h + 2), f"count={integrate(density):.3f}", fill=(255, 255, 255))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path)


def _cmd_render(args) -> int:
    if args.density is not None:
        density = np.load(args.density)
    elif args.checkpoint is not None and args.image is not None:
        params = load_checkpoint(args.checkpoint)
        density = predict_density(params, load_image(args.image))
    else:
        raise ValueError("render needs either --density or both --checkpoint and --image")
    _render_heatmap(np.asarray(density, dtype=np.float64), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="srcount", description="Crowd counting toolkit")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("build-dataset", parents=[], help="construct a multi-resolution dataset")
    p.add_argument("src_dir")
    p.add_argument("ann_file")
    p.add_argument("out_dir")
    p.add_argument("--config")
    p.add_argument("--method", choices=sorted(ds.METHODS))
    p.add_argument("--scales")
    p.add_argument("--long-side", type=int, dest="long_side")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("train", help="train a counting model on a built dataset")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sr-scale", type=int, dest="sr_scale")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--out", help="write the full report as JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="print the predicted count for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--density-out", dest="density_out", help="save the density grid as .npy")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("render", help="render a density heatmap raster")
    p.add_argument("out")
    p.add_argument("--density", help="density grid .npy file")
    p.add_argument("--checkpoint")
    p.add_argument("--image")
    p.set_defaults(func=_cmd_render)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "cmd", None) is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ShapeError, CheckpointError, DetachedHeadError, TrainingDivergedError) as exc:
        log.error("%s", exc)
        return EXIT_STATE
    except (DatasetError, FileNotFoundError, IsADirectoryError, UnidentifiedImageError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        log.error("invalid JSON: %s", exc)
        return EXIT_INPUT
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

"""Hierarchical-resolution dataset construction and validation.

From source images plus head-point annotations, the builder keeps images
whose longer side reaches a threshold, rescales them so the longer side
equals ``long_side`` (short side rounded to the nearest multiple of the
largest scale, so every downsampled extent is an exact integer), and emits
the full-resolution image together with one downsampled image and rescaled
annotation set per configured scale.  Entries get a seeded train/test split
and are written under the output directory with a JSON manifest whose paths
are relative to the manifest location.  Identical inputs and seed produce a
byte-identical manifest.

Annotation source files hold a list of records keyed by image filename (see
srcount.density for the record format).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .density import AnnotationSet, read_annotations, rescale_points, write_annotations
from .errors import DatasetError
from .imgio import load_image, save_image
from .resample import METHODS, resize

__all__ = ["BuildConfig", "ManifestEntry", "DatasetManifest", "ValidationReport", "build", "validate"]

log = logging.getLogger(__name__)

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class BuildConfig:
    long_side: int = 2048
    min_side_threshold: int | None = None  # defaults to long_side
    method: str = "linear"
    scales: tuple[int, ...] = (2, 4)
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(sorted(int(s) for s in self.scales)))
        if not self.scales or any(s < 2 for s in self.scales):
            raise ValueError(f"scales must be integers >= 2, got {self.scales}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'; expected one of {sorted(METHODS)}")
        if self.long_side < max(self.scales) or self.long_side % max(self.scales) != 0:
            raise ValueError(
                f"long_side ({self.long_side}) must be a positive multiple of max scale "
                f"({max(self.scales)})"
            )
        if not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError(f"test_fraction must be in [0, 1], got {self.test_fraction}")

    @property
    def effective_min_side(self) -> int:
        return self.long_side if self.min_side_threshold is None else self.min_side_threshold

    def to_dict(self) -> dict:
        return {
            "long_side": self.long_side,
            "min_side_threshold": self.effective_min_side,
            "method": self.method,
            "scales": list(self.scales),
            "test_fraction": self.test_fraction,
            "seed": self.seed,
        }


@dataclass
class ManifestEntry:
    id: str
    split: str
    hr_path: str
    lr_paths: dict[int, str]
    annotation_paths: dict[str, str]  # keys: "hr" plus one per scale
    factors: tuple[float, float]  # (height, width) factors applied source -> HR

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "split": self.split,
            "hr_path": self.hr_path,
            "lr_paths": {str(s): p for s, p in sorted(self.lr_paths.items())},
            "annotation_paths": dict(sorted(self.annotation_paths.items())),
            "factors": [self.factors[0], self.factors[1]],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            id=d["id"],
            split=d["split"],
            hr_path=d["hr_path"],
            lr_paths={int(s): p for s, p in d["lr_paths"].items()},
            annotation_paths=dict(d["annotation_paths"]),
            factors=(float(d["factors"][0]), float(d["factors"][1])),
        )


@dataclass
class DatasetManifest:
    config: dict
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def entries_for(self, split: str) -> list[ManifestEntry]:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got '{split}'")
        return [e for e in self.entries if e.split == split]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "entries": [e.to_dict() for e in sorted(self.entries, key=lambda e: e.id)],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
            entries = [ManifestEntry.from_dict(e) for e in data["entries"]]
            config = data["config"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: unreadable manifest ({exc})") from exc
        return cls(config=config, entries=entries, root=path.parent)


def _round_to_multiple(value: float, multiple: int) -> int:
    return max(multiple, int(round(value / multiple)) * multiple)


def build(src_dir, ann_path, out_dir, config: BuildConfig = BuildConfig()) -> DatasetManifest:
    """Construct the dataset under out_dir and return its manifest.

    Every admitted source image must have an annotation record whose "image"
    field matches its filename; a missing record is an error, while an image
    below the size threshold is skipped with a log line.
    """
    src_dir = Path(src_dir)
    out_dir = Path(out_dir)
    records = {a.image: a for a in read_annotations(ann_path)}
    sources = sorted(p for p in src_dir.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)

    max_scale = max(config.scales)
    entries: list[ManifestEntry] = []
    for src in sources:
        if src.name not in records:
            raise DatasetError(f"no annotation record for image '{src.name}'")
        image = load_image(src)
        h, w = image.shape[:2]
        ann = records[src.name]
        if (ann.height, ann.width) != (h, w):
            raise DatasetError(
                f"'{src.name}': annotation frame {ann.height}x{ann.width} does not match "
                f"image extents {h}x{w}"
            )
        if max(h, w) < config.effective_min_side:
            log.info("skipping '%s': %dx%d below threshold %d", src.name, h, w, config.effective_min_side)
            continue

        if h >= w:
            new_h = config.long_side
            new_w = _round_to_multiple(w * config.long_side / h, max_scale)
        else:
            new_w = config.long_side
            new_h = _round_to_multiple(h * config.long_side / w, max_scale)
        fh, fw = new_h / h, new_w / w

        entry_id = src.stem
        hr = resize(image, new_h, new_w, config.method)
        hr_ann = rescale_points(ann, fh, fw)
        hr_path = f"images/{entry_id}_hr.png"
        hr_ann_path = f"annotations/{entry_id}_hr.json"
        save_image(hr, out_dir / hr_path)
        (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
        write_annotations(hr_ann, out_dir / hr_ann_path)

        lr_paths: dict[int, str] = {}
        ann_paths = {"hr": hr_ann_path}
        for s in config.scales:
            lr = resize(hr, new_h // s, new_w // s, config.method)
            lr_ann = rescale_points(hr_ann, 1.0 / s, 1.0 / s)
            lr_path = f"images/{entry_id}_x{s}.png"
            lr_ann_path = f"annotations/{entry_id}_x{s}.json"
            save_image(lr, out_dir / lr_path)
            write_annotations(lr_ann, out_dir / lr_ann_path)
            lr_paths[s] = lr_path
            ann_paths[str(s)] = lr_ann_path

        entries.append(
            ManifestEntry(
                id=entry_id,
                split="train",
                hr_path=hr_path,
                lr_paths=lr_paths,
                annotation_paths=ann_paths,
                factors=(fh, fw),
            )
        )

    entries.sort(key=lambda e: e.id)
    rng = np.random.default_rng(config.seed)
    n_test = int(round(len(entries) * config.test_fraction))
    for idx in rng.permutation(len(entries))[:n_test]:
        entries[idx].split = "test"

    manifest = DatasetManifest(config=config.to_dict(), entries=entries, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


@dataclass
class ValidationReport:
    entries: dict[str, list[str]]  # entry id -> error strings (empty = pass)

    @property
    def ok(self) -> bool:
        return all(not errs for errs in self.entries.values())

    def failures(self) -> dict[str, list[str]]:
        return {eid: errs for eid, errs in self.entries.items() if errs}

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "entries": {eid: list(errs) for eid, errs in sorted(self.entries.items())},
        }


def _image_extents(path: Path) -> tuple[int, int]:
    with PILImage.open(path) as img:
        w, h = img.size
    return h, w


def validate(manifest: DatasetManifest) -> ValidationReport:
    """Check file existence, extent ratios, and cross-scale count consistency."""
    scales = [int(s) for s in manifest.config.get("scales", [])]
    report: dict[str, list[str]] = {}
    for entry in sorted(manifest.entries, key=lambda e: e.id):
        errs: list[str] = []
        paths = {"hr": entry.hr_path}
        for s in scales:
            paths[f"x{s}"] = entry.lr_paths.get(s, "")
        ann_files = dict(entry.annotation_paths)

        for label, rel in list(paths.items()) + list(ann_files.items()):
            if not rel or not (manifest.root / rel).exists():
                errs.append(f"missing file: {rel or label}")
        if errs:
            report[entry.id] = errs
            continue

        hr_h, hr_w = _image_extents(manifest.root / entry.hr_path)
        max_scale = max(scales) if scales else 1
        if hr_h % max_scale or hr_w % max_scale:
            errs.append(f"hr extents {hr_h}x{hr_w} not divisible by {max_scale}")
        for s in scales:
            lr_h, lr_w = _image_extents(manifest.root / entry.lr_paths[s])
            if (lr_h, lr_w) != (hr_h // s, hr_w // s):
                errs.append(
                    f"x{s} extents {lr_h}x{lr_w} != hr/{s} = {hr_h // s}x{hr_w // s}"
                )

        counts: dict[str, int] = {}
        frames = {"hr": (hr_h, hr_w)}
        for s in scales:
            frames[str(s)] = _image_extents(manifest.root / entry.lr_paths[s])
        for key, rel in ann_files.items():
            try:
                ann = read_annotations(manifest.root / rel)[0]
            except (ValueError, KeyError) as exc:
                errs.append(f"annotation '{rel}' unreadable: {exc}")
                continue
            counts[key] = ann.count()
            if key in frames and (ann.height, ann.width) != frames[key]:
                errs.append(
                    f"annotation '{key}' frame {ann.height}x{ann.width} "
                    f"does not match image extents {frames[key][0]}x{frames[key][1]}"
                )
        if len(set(counts.values())) > 1:
            errs.append(f"annotation counts differ across scales: {counts}")
        report[entry.id] = errs
    return ValidationReport(entries=report)

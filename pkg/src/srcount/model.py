"""Counting network with a detachable super-resolution head.

The backbone is a VGG-style stack of five conv stages with 2x2 max pooling
after stages 1-3 only, so stage 3 runs at stride 4 and stages 4 and 5 at
stride 8.  The counting head (3x3 conv + relu, then 1x1 conv, no final
activation) turns the stage-5 feature into a density grid at 1/8 of the input
extents.  The super-resolution head concatenates the configured backbone
stages (each bilinearly resized to the shallowest selected stage), applies a
single 3x3 conv emitting sr_out_channels * r_total^2 channels, and
pixel-shuffles by r_total = sr_scale * fused_stride back to image space at
sr_scale times the input extents.  The heads share no parameters, so removing
the super-resolution partition leaves counting outputs bit-identical.

Parameters are named tensors; names under "sr." form the super-resolution
partition, everything else the counting partition.  A single ModelParameters
instance must not be optimized while a forward/backward using it is running;
forwards over distinct copies are safe concurrently.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import (
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    max_pool2d,
    pixel_shuffle,
    relu,
)
from .errors import CheckpointError, DetachedHeadError, ShapeError

__all__ = [
    "ModelSpec",
    "ModelParameters",
    "init_parameters",
    "parameter_shapes",
    "forward_counting",
    "forward_sr",
    "forward_joint",
    "fuse_stages",
    "detach_sr_head",
    "save_checkpoint",
    "load_checkpoint",
]

# Feature stride at the output of each stage; pooling follows stages 1-3.
STAGE_STRIDES = (1, 2, 4, 8, 8)
_POOL_AFTER = frozenset({1, 2, 3})
COUNTING_STRIDE = 8
INIT_STD = 0.01


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; the default is the desk-scale toy preset."""

    in_channels: int = 3
    stage_widths: tuple[int, ...] = (16, 32, 64, 64, 64)
    stage_convs: tuple[int, ...] = (2, 2, 2, 2, 2)
    fusion_stages: tuple[int, ...] = (3, 4, 5)
    head_width: int = 64
    sr_scale: int = 2
    sr_out_channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_convs", tuple(int(c) for c in self.stage_convs))
        object.__setattr__(
            self, "fusion_stages", tuple(sorted(int(s) for s in self.fusion_stages))
        )
        if len(self.stage_widths) != 5 or any(w < 1 for w in self.stage_widths):
            raise ValueError(f"stage_widths must be 5 positive ints, got {self.stage_widths}")
        if len(self.stage_convs) != 5 or any(c < 1 for c in self.stage_convs):
            raise ValueError(f"stage_convs must be 5 positive ints, got {self.stage_convs}")
        if not self.fusion_stages or not set(self.fusion_stages) <= set(range(1, 6)):
            raise ValueError(f"fusion_stages must be a non-empty subset of 1..5, got {self.fusion_stages}")
        if len(set(self.fusion_stages)) != len(self.fusion_stages):
            raise ValueError(f"fusion_stages contains duplicates: {self.fusion_stages}")
        if self.sr_scale not in (2, 4):
            raise ValueError(f"sr_scale must be 2 or 4, got {self.sr_scale}")
        if self.in_channels < 1 or self.head_width < 1 or self.sr_out_channels < 1:
            raise ValueError("in_channels, head_width and sr_out_channels must be positive")

    @classmethod
    def vgg16(cls, **overrides) -> "ModelSpec":
        """Paper-scale widths; ships untrained (no pretrained weights)."""
        base = dict(stage_widths=(64, 128, 256, 512, 512), stage_convs=(2, 2, 3, 3, 3))
        base.update(overrides)
        return cls(**base)

    @property
    def fused_stride(self) -> int:
        return STAGE_STRIDES[min(self.fusion_stages) - 1]

    @property
    def sr_upscale_total(self) -> int:
        return self.sr_scale * self.fused_stride

    @property
    def fused_channels(self) -> int:
        return sum(self.stage_widths[s - 1] for s in self.fusion_stages)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stage_widths": list(self.stage_widths),
            "stage_convs": list(self.stage_convs),
            "fusion_stages": list(self.fusion_stages),
            "head_width": self.head_width,
            "sr_scale": self.sr_scale,
            "sr_out_channels": self.sr_out_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def parameter_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], str, str]]:
    """Ordered (name, shape, partition, kind) plan; kind is 'weight' or 'bias'."""
    plan: list[tuple[str, tuple[int, ...], str, str]] = []

    def conv(name: str, cout: int, cin: int, k: int, partition: str) -> None:
        plan.append((f"{name}.weight", (cout, cin, k, k), partition, "weight"))
        plan.append((f"{name}.bias", (1, cout, 1, 1), partition, "bias"))

    cin = spec.in_channels
    for s in range(1, 6):
        width = spec.stage_widths[s - 1]
        for i in range(1, spec.stage_convs[s - 1] + 1):
            conv(f"stage{s}.conv{i}", width, cin, 3, "counting")
            cin = width
    conv("head.conv1", spec.head_width, spec.stage_widths[4], 3, "counting")
    conv("head.conv2", 1, spec.head_width, 1, "counting")
    r = spec.sr_upscale_total
    conv("sr.conv", spec.sr_out_channels * r * r, spec.fused_channels, 3, "sr")
    return plan


class ModelParameters:
    """Ordered named tensors partitioned into 'counting' and 'sr'."""

    def __init__(self, spec: ModelSpec, tensors: dict[str, Tensor]) -> None:
        self.spec = spec
        self._tensors = dict(tensors)

    @staticmethod
    def partition_of(name: str) -> str:
        return "sr" if name.startswith("sr.") else "counting"

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def counting(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self.partition_of(n) == "counting"}

    def sr_head(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self.partition_of(n) == "sr"}

    @property
    def has_sr_head(self) -> bool:
        return any(self.partition_of(n) == "sr" for n in self._tensors)

    def n_scalars(self) -> int:
        return sum(t.numel for t in self._tensors.values())

    def watch(self, rec) -> None:
        for t in self._tensors.values():
            rec.watch(t)

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.spec, {n: Tensor(t.data.copy()) for n, t in self.items()})


def init_parameters(spec: ModelSpec, seed: int = 0) -> ModelParameters:
    """Gaussian weights (std 0.01) and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, _partition, kind in parameter_shapes(spec):
        if kind == "weight":
            tensors[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape))
        else:
            tensors[name] = Tensor(np.zeros(shape))
    return ModelParameters(spec, tensors)


def detach_sr_head(params: ModelParameters) -> ModelParameters:
    """Drop the 'sr' partition; counting outputs are unaffected.  Idempotent."""
    return ModelParameters(params.spec, params.counting())


def _check_input(spec: ModelSpec, x: Tensor) -> None:
    _, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {spec.in_channels}")
    if h % COUNTING_STRIDE or w % COUNTING_STRIDE:
        raise ShapeError(f"input extents {h}x{w} must be divisible by {COUNTING_STRIDE}")


def _stage_features(params: ModelParameters, x: Tensor, needed: set[int]) -> dict[int, Tensor]:
    spec = params.spec
    feats: dict[int, Tensor] = {}
    h = x
    for s in range(1, 6):
        for i in range(1, spec.stage_convs[s - 1] + 1):
            h = relu(conv2d(h, params[f"stage{s}.conv{i}.weight"], params[f"stage{s}.conv{i}.bias"], 1, 1))
        if s in needed:
            feats[s] = h
        if s in _POOL_AFTER:
            h = max_pool2d(h, 2, 2)
    return feats


def _counting_head(params: ModelParameters, feature: Tensor) -> Tensor:
    h = relu(conv2d(feature, params["head.conv1.weight"], params["head.conv1.bias"], 1, 1))
    return conv2d(h, params["head.conv2.weight"], params["head.conv2.bias"], 1, 0)


def fuse_stages(spec: ModelSpec, stage_features: dict[int, Tensor]) -> Tensor:
    """Resize each configured stage feature to the shallowest one and concat."""
    for s in spec.fusion_stages:
        if s not in stage_features:
            raise ShapeError(f"fuse_stages: missing feature for configured stage {s}")
    target = stage_features[min(spec.fusion_stages)]
    _, _, th, tw = target.shape
    resized = [bilinear_resize(stage_features[s], th, tw) for s in spec.fusion_stages]
    return concat_channels(resized)


def _sr_head(params: ModelParameters, fused: Tensor) -> Tensor:
    if not params.has_sr_head:
        raise DetachedHeadError(
            "super-resolution head detached: parameters carry no 'sr' partition"
        )
    pre = conv2d(fused, params["sr.conv.weight"], params["sr.conv.bias"], 1, 1)
    return pixel_shuffle(pre, params.spec.sr_upscale_total)


def forward_counting(params: ModelParameters, x: Tensor) -> Tensor:
    """Density grid (N, 1, H/8, W/8) for an (N, C, H, W) image tensor."""
    _check_input(params.spec, x)
    feats = _stage_features(params, x, {5})
    return _counting_head(params, feats[5])


def forward_sr(params: ModelParameters, x: Tensor) -> Tensor:
    """Reconstructed image (N, C_sr, H*sr_scale, W*sr_scale)."""
    _check_input(params.spec, x)
    if not params.has_sr_head:
        raise DetachedHeadError(
            "super-resolution head detached: parameters carry no 'sr' partition"
        )
    feats = _stage_features(params, x, set(params.spec.fusion_stages))
    return _sr_head(params, fuse_stages(params.spec, feats))


def forward_joint(params: ModelParameters, x: Tensor) -> tuple[Tensor, Tensor]:
    """Both heads over one shared backbone pass: (density, sr_image)."""
    _check_input(params.spec, x)
    if not params.has_sr_head:
        raise DetachedHeadError(
            "super-resolution head detached: parameters carry no 'sr' partition"
        )
    needed = set(params.spec.fusion_stages) | {5}
    feats = _stage_features(params, x, needed)
    density = _counting_head(params, feats[5])
    sr = _sr_head(params, fuse_stages(params.spec, feats))
    return density, sr


# ---------------------------------------------------------------------------
# checkpoints: header (name, shape, partition, offset) + raw little-endian f64
# ---------------------------------------------------------------------------

_MAGIC = b"NTAR1\n"


def save_checkpoint(params: ModelParameters, path) -> None:
    entries = []
    offset = 0
    buffers = []
    for name, t in params.items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "partition": params.partition_of(name),
                "offset": offset,
            }
        )
        buffers.append(buf)
        offset += len(buf)
    header = json.dumps({"spec": params.spec.to_dict(), "tensors": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path) -> ModelParameters:
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a named-tensor archive")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    hstart = len(_MAGIC) + 4
    try:
        header = json.loads(raw[hstart : hstart + hlen].decode())
        spec = ModelSpec.from_dict(header["spec"])
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc

    expected = {name: (shape, part) for name, shape, part, _ in parameter_shapes(spec)}
    diffs = []
    seen = set()
    data_start = hstart + hlen
    tensors: dict[str, Tensor] = {}
    for e in entries:
        name, shape = e["name"], tuple(e["shape"])
        seen.add(name)
        if name not in expected:
            diffs.append(f"unexpected tensor '{name}'")
            continue
        want_shape, want_part = expected[name]
        if shape != want_shape:
            diffs.append(f"'{name}': shape {list(shape)} != expected {list(want_shape)}")
            continue
        if e.get("partition") != want_part:
            diffs.append(f"'{name}': partition {e.get('partition')!r} != expected {want_part!r}")
            continue
        nbytes = int(np.prod(shape)) * 8
        start = data_start + e["offset"]
        buf = raw[start : start + nbytes]
        if len(buf) != nbytes:
            diffs.append(f"'{name}': buffer truncated ({len(buf)} of {nbytes} bytes)")
            continue
        tensors[name] = Tensor(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    missing_counting = [
        n for n, (_, part) in expected.items() if part == "counting" and n not in seen
    ]
    sr_names = [n for n, (_, part) in expected.items() if part == "sr"]
    sr_present = [n for n in sr_names if n in seen]
    if missing_counting:
        diffs.append(f"missing counting tensors: {missing_counting}")
    if sr_present and len(sr_present) != len(sr_names):
        diffs.append(f"partial sr partition: have {sr_present}, expected {sr_names}")
    if diffs:
        raise CheckpointError(f"{path}: checkpoint/spec mismatch: " + "; ".join(diffs))
    return ModelParameters(spec, tensors)

"""Dense 4-d tensors (batch, channels, height, width) with reverse-mode autodiff.

All data is float64.  Operators are pure functions; gradients are tracked only
while a :class:`ComputationRecord` is active (see :func:`record`).  Leaf
tensors must be enrolled with ``record.watch`` to receive gradients; anything
else fed to an operator is treated as a constant and never has its ``grad``
written.  Repeated :func:`backward` calls accumulate into ``grad`` until
:func:`zero_grad` resets it.

Only one record may be active at a time (one training thread); tensors carry
no other shared state and may be handed between threads while no record is
active.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "record",
    "backward",
    "zero_grad",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "relu",
    "max_pool2d",
    "concat_channels",
    "bilinear_resize",
    "add",
    "subtract",
    "scale",
    "sum_all",
    "mse",
]


class Tensor:
    """A 4-d float64 array plus an optional gradient buffer.

    ``node_id`` is a handle into the computation record that produced or
    watches this tensor; it is ``None`` for constants.
    """

    __slots__ = ("data", "grad", "node_id", "_record")

    def __init__(self, data) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-d (batch, channels, height, width); "
                f"got {arr.ndim}-d data with shape {arr.shape}"
            )
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._record: "ComputationRecord | None" = None

    @staticmethod
    def scalar(value: float) -> "Tensor":
        return Tensor(np.full((1, 1, 1, 1), float(value)))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.numel != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class _OpNode(NamedTuple):
    out_id: int
    in_ids: tuple[int | None, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class ComputationRecord:
    """Ordered tape of executed operations, replayed in reverse by backward().

    Operations are appended in execution order, so every node's inputs precede
    it and the reverse sweep visits each node after all of its consumers.
    """

    def __init__(self) -> None:
        self._nodes: list[_OpNode] = []
        self._watched: dict[int, Tensor] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, tensor: Tensor) -> Tensor:
        """Enroll a leaf tensor so backward() accumulates into its .grad."""
        if tensor._record is not self:
            tensor._record = self
            tensor.node_id = self._new_id()
            self._watched[tensor.node_id] = tensor
        return tensor

    def _append(self, out: Tensor, in_ids, backward_fn) -> None:
        out._record = self
        out.node_id = self._new_id()
        self._nodes.append(_OpNode(out.node_id, tuple(in_ids), backward_fn))

    def _backward_from(self, loss: Tensor) -> None:
        flowing: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = flowing.pop(node.out_id, None)
            if g is None:
                continue
            for in_id, ig in zip(node.in_ids, node.backward(g)):
                if in_id is None or ig is None:
                    continue
                leaf = self._watched.get(in_id)
                if leaf is not None:
                    if leaf.grad is None:
                        leaf.grad = np.zeros_like(leaf.data)
                    leaf.grad += ig
                else:
                    prev = flowing.get(in_id)
                    flowing[in_id] = ig if prev is None else prev + ig


_ACTIVE_RECORD: ComputationRecord | None = None


@contextmanager
def record():
    """Activate a fresh ComputationRecord for the duration of the block."""
    global _ACTIVE_RECORD
    if _ACTIVE_RECORD is not None:
        raise GraphError("a computation record is already active")
    rec = ComputationRecord()
    _ACTIVE_RECORD = rec
    try:
        yield rec
    finally:
        _ACTIVE_RECORD = None


def _track(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    rec = _ACTIVE_RECORD
    if rec is None:
        return out
    in_ids = tuple(
        t.node_id if (t._record is rec and t.node_id is not None) else None for t in inputs
    )
    if any(i is not None for i in in_ids):
        rec._append(out, in_ids, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every watched leaf's .grad."""
    if loss.numel != 1:
        raise GraphError(f"backward() needs a scalar loss; got shape {loss.shape}")
    if loss._record is None or loss.node_id is None:
        raise GraphError("loss was not produced under an active computation record")
    loss._record._backward_from(loss)


def zero_grad(tensors) -> None:
    """Drop accumulated gradients on a tensor or an iterable of tensors."""
    if isinstance(tensors, Tensor):
        tensors = (tensors,)
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding (no kernel flip).

    ``weight`` is (C_out, C_in, k, k); ``bias`` is carried as (1, C_out, 1, 1).
    Output extents follow floor((H + 2*padding - k) / stride) + 1.
    """
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    k = kh
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if bias.shape != (1, cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} must be (1, {cout}, 1, 1)")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(n, cin, k, k, out_h, out_w),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    out_data = np.tensordot(weight.data, windows, axes=([1, 2, 3], [1, 2, 3]))
    out_data = out_data.transpose(1, 0, 2, 3) + bias.data
    out = Tensor(out_data)

    def bwd(g: np.ndarray):
        grad_w = np.tensordot(g, windows, axes=([0, 2, 3], [0, 4, 5]))
        grad_b = g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1)
        grad_win = np.tensordot(weight.data, g, axes=([0], [1]))  # (cin,k,k,n,oh,ow)
        grad_win = grad_win.transpose(3, 0, 1, 2, 4, 5)
        gx = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += (
                    grad_win[:, :, i, j]
                )
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        return gx, grad_w, grad_b

    return _track(out, (x, weight, bias), bwd)


def _shuffle_data(arr: np.ndarray, r: int) -> np.ndarray:
    n, c_r2, h, w = arr.shape
    c = c_r2 // (r * r)
    return arr.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)


def _unshuffle_data(arr: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = arr.shape
    h, w = hr // r, wr // r
    return arr.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r^2, H, W) into (N, C, r*H, r*W).

    Sub-pixel ordering is row-major: out[n, c, r*h + dy, r*w + dx] comes from
    input channel c*r^2 + dy*r + dx.
    """
    if r < 1:
        raise ValueError(f"pixel_shuffle: upscale factor must be positive, got {r}")
    n, c, h, w = x.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    out = Tensor(_shuffle_data(x.data, r))
    return _track(out, (x,), lambda g: (_unshuffle_data(g, r),))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of pixel_shuffle: (N, C, r*H, r*W) -> (N, C*r^2, H, W)."""
    if r < 1:
        raise ValueError(f"pixel_unshuffle: upscale factor must be positive, got {r}")
    n, c, h, w = x.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: extents {h}x{w} not divisible by r = {r}")
    out = Tensor(_unshuffle_data(x.data, r))
    return _track(out, (x,), lambda g: (_shuffle_data(g, r),))


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0
    return _track(out, (x,), lambda g: (g * mask,))


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; only window == stride is supported."""
    if window != stride:
        raise ShapeError(f"max_pool2d: window ({window}) must equal stride ({stride})")
    n, c, h, w = x.shape
    if h % stride != 0 or w % stride != 0:
        raise ShapeError(f"max_pool2d: extents {h}x{w} not divisible by stride {stride}")
    hb, wb = h // stride, w // stride
    blocks = (
        x.data.reshape(n, c, hb, stride, wb, stride)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, hb, wb, stride * stride)
    )
    idx = blocks.argmax(axis=4)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=4)[..., 0])

    def bwd(g: np.ndarray):
        buf = np.zeros_like(blocks)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=4)
        gx = (
            buf.reshape(n, c, hb, wb, stride, stride)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _track(out, (x,), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis; batch and spatial extents must agree."""
    if len(xs) == 0:
        raise ValueError("concat_channels: need at least one tensor")
    n, _, h, w = xs[0].shape
    for i, t in enumerate(xs):
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise ShapeError(
                f"concat_channels: input {i} has batch/spatial {tn}x{th}x{tw}, "
                f"expected {n}x{h}x{w}"
            )
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    return _track(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=1)))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic tent-kernel weights at half-pixel centers, clamped."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    f = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear spatial resize with half-pixel-center alignment.

    Linear in its input, so the backward pass is the transposed weighting.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: output extents must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    wh = _interp_matrix(h, out_h)
    ww = _interp_matrix(w, out_w)
    out = Tensor(np.einsum("ih,nchw,jw->ncij", wh, x.data, ww, optimize=True))
    return _track(
        out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", wh, g, ww, optimize=True),)
    )


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes disagree, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _track(out, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("subtract", a, b)
    out = Tensor(a.data - b.data)
    return _track(out, (a, b), lambda g: (g, -g))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(x.data * factor)
    return _track(out, (x,), lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()))
    shape = x.shape
    return _track(out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2, as a scalar tensor."""
    _check_same_shape("mse", a, b)
    diff = a.data - b.data
    out = Tensor(np.full((1, 1, 1, 1), np.mean(diff * diff)))
    coeff = 2.0 / diff.size

    def bwd(g: np.ndarray):
        ga = g * (coeff * diff)
        return ga, -ga

    return _track(out, (a, b), bwd)

"""Differentiable operations on N x C x H x W tensors."""

from __future__ import annotations

import contextlib
import hashlib
import math
import threading
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import DTYPE, RngState, Tensor, make_result


class ShapeError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class IndexCorruptionError(ValueError):
    pass


# --------------------------------------------------------------------------
# Kink watching: relu / max-pool report their discrete choices so a
# finite-difference check can skip coordinates whose perturbation flips one.

_watch = threading.local()


@contextlib.contextmanager
def kink_watch() -> Iterator["hashlib._Hash"]:
    prev = getattr(_watch, "hasher", None)
    hasher = hashlib.sha1()
    _watch.hasher = hasher
    try:
        yield hasher
    finally:
        _watch.hasher = prev


def _record_pattern(arr: np.ndarray) -> None:
    hasher = getattr(_watch, "hasher", None)
    if hasher is not None:
        hasher.update(np.ascontiguousarray(arr).tobytes())


# --------------------------------------------------------------------------
# Geometry helpers


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects an N x C x H x W tensor, got shape {x.shape}")


def same_padding(size: int, extent: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding giving ceil(size / stride) outputs."""
    out = -(-size // stride)
    total = max((out - 1) * stride + extent - size, 0)
    return total // 2, total - total // 2


def _resolve_padding(padding, h: int, w: int, eh: int, ew: int, stride: int):
    if padding == "same":
        return same_padding(h, eh, stride), same_padding(w, ew, stride)
    if isinstance(padding, str):
        raise ValueError(f"unknown padding mode {padding!r}")
    p = int(padding)
    if p < 0:
        raise GeometryError("padding must be non-negative")
    return (p, p), (p, p)


def _out_size(padded: int, extent: int, stride: int) -> int:
    return (padded - extent) // stride + 1


# --------------------------------------------------------------------------
# Convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int | str = 0,
) -> Tensor:
    """Cross-correlation of ``x`` with an (out, in, kh, kw) kernel.

    The kernel is applied one tap at a time: each tap contributes a
    strided view of the padded input contracted over channels.
    """
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"kernel must be 4-d, got {weight.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but kernel expects {ci}")
    if stride < 1 or dilation < 1:
        raise GeometryError("stride and dilation must be >= 1")
    if kh < 1 or kw < 1:
        raise GeometryError("kernel extent must be >= 1")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match {co} output channels")
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    (pt, pb), (pl, pr) = _resolve_padding(padding, h, w, eh, ew, stride)
    hp, wp = h + pt + pb, w + pl + pr
    ho, wo = _out_size(hp, eh, stride), _out_size(wp, ew, stride)
    if ho < 1 or wo < 1:
        raise GeometryError(f"conv2d output would be {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    wd = weight.data

    def tap(i: int, j: int) -> tuple[slice, slice]:
        r0, c0 = i * dilation, j * dilation
        return (
            slice(r0, r0 + stride * (ho - 1) + 1, stride),
            slice(c0, c0 + stride * (wo - 1) + 1, stride),
        )

    out = np.zeros((co, n, ho, wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            rs, cs = tap(i, j)
            out += np.tensordot(wd[:, :, i, j], xp[:, :, rs, cs], axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward_fn(g: np.ndarray):
        gx = gw = gb = None
        gt = g.transpose(1, 0, 2, 3)  # (co, n, ho, wo)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = tap(i, j)
                    gxp[:, :, rs, cs] += np.tensordot(wd[:, :, i, j], gt, axes=([0], [0])).transpose(1, 0, 2, 3)
            gx = gxp[:, :, pt : pt + h, pl : pl + w]
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    rs, cs = tap(i, j)
                    gw[:, :, i, j] = np.tensordot(g, xp[:, :, rs, cs], axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_result(out, parents, backward_fn)


# --------------------------------------------------------------------------
# Pooling


@dataclass(frozen=True)
class PoolIndices:
    """Argmax positions of a max-pool, as flat offsets into each input plane."""

    indices: np.ndarray
    input_shape: tuple[int, int, int, int]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indices.shape


def _pool_geometry(x: Tensor, window: int, stride: int, padding):
    _check4(x, "pooling")
    if window < 1 or stride < 1:
        raise GeometryError("window and stride must be >= 1")
    _, _, h, w = x.shape
    (pt, pb), (pl, pr) = _resolve_padding(padding, h, w, window, window, stride)
    hp, wp = h + pt + pb, w + pl + pr
    if window > hp or window > wp:
        raise GeometryError(f"window {window} larger than padded input {hp}x{wp}")
    return (pt, pb, pl, pr), _out_size(hp, window, stride), _out_size(wp, window, stride)


def max_pool2d_with_indices(
    x: Tensor, window: int, stride: int, padding: int | str = 0
) -> tuple[Tensor, PoolIndices]:
    """Window maximum; ties go to the lowest flat input index.

    Padding is filled with -inf so a padded cell never wins.
    """
    (pt, pb, pl, pr), ho, wo = _pool_geometry(x, window, stride, padding)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    rspan, cspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    taps = [(i, j) for i in range(window) for j in range(window)]
    out = np.full((n, c, ho, wo), -np.inf)
    local = np.zeros((n, c, ho, wo), dtype=np.int16 if window * window < 2**15 else np.int64)
    # taps visited in row-major window order; strict '>' keeps the first maximum
    better = np.empty(out.shape, dtype=bool)
    for t, (i, j) in enumerate(taps):
        v = xp[:, :, i : i + rspan : stride, j : j + cspan : stride]
        np.greater(v, out, out=better)
        np.copyto(out, v, where=better)
        np.copyto(local, t, where=better)
    dr, dc = np.divmod(local, window)
    rows = np.arange(ho)[:, None] * stride + dr - pt
    cols = np.arange(wo)[None, :] * stride + dc - pl
    flat = (rows * w + cols).astype(np.int64)
    _record_pattern(flat)
    indices = PoolIndices(flat, (n, c, h, w))

    def backward_fn(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        hit = np.empty(local.shape, dtype=bool)
        part = np.empty(g.shape, dtype=DTYPE)
        for t, (i, j) in enumerate(taps):
            np.equal(local, t, out=hit)
            np.multiply(g, hit, out=part)
            gxp[:, :, i : i + rspan : stride, j : j + cspan : stride] += part
        return (gxp[:, :, pt : pt + h, pl : pl + w],)

    return make_result(out, [x], backward_fn), indices


def max_pool2d(x: Tensor, window: int, stride: int, padding: int | str = 0) -> Tensor:
    return max_pool2d_with_indices(x, window, stride, padding)[0]


def avg_pool2d(x: Tensor, window: int, stride: int, padding: int | str = 0) -> Tensor:
    """Window mean with zero padding counted in the 1/window**2 divisor."""
    (pt, pb, pl, pr), ho, wo = _pool_geometry(x, window, stride, padding)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    scale = 1.0 / (window * window)
    rspan, cspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros((n, c, ho, wo), dtype=DTYPE)
    for i in range(window):
        for j in range(window):
            out += xp[:, :, i : i + rspan : stride, j : j + cspan : stride]
    out *= scale

    def backward_fn(g: np.ndarray):
        gxp = np.zeros_like(xp)
        gs = g * scale
        for i in range(window):
            for j in range(window):
                gxp[:, :, i : i + rspan : stride, j : j + cspan : stride] += gs
        return (gxp[:, :, pt : pt + h, pl : pl + w],)

    return make_result(out, [x], backward_fn)


def max_unpool2d(x: Tensor, indices: PoolIndices, output_shape: Sequence[int] | None = None) -> Tensor:
    """Scatter each value back to the position recorded by its max-pool."""
    _check4(x, "max_unpool2d")
    if indices.indices.shape != x.shape:
        raise ShapeError(f"indices shape {indices.indices.shape} does not match input {x.shape}")
    shape = tuple(output_shape) if output_shape is not None else indices.input_shape
    n, c, h, w = shape
    if (n, c) != x.shape[:2]:
        raise ShapeError(f"unpool target {shape} incompatible with input {x.shape}")
    flat = indices.indices.reshape(n * c, -1)
    if flat.size and (flat.min() < 0 or flat.max() >= h * w):
        raise IndexCorruptionError("pool index out of bounds for the unpool target")
    out = np.zeros((n * c, h * w), dtype=DTYPE)
    np.put_along_axis(out, flat, x.data.reshape(n * c, -1), axis=1)

    def backward_fn(g: np.ndarray):
        return (np.take_along_axis(g.reshape(n * c, h * w), flat, axis=1).reshape(x.shape),)

    return make_result(out.reshape(shape), [x], backward_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check4(x, "upsample_nearest")
    if factor < 1:
        raise GeometryError("upsample factor must be >= 1")
    if factor == 1:
        return make_result(x.data.copy(), [x], lambda g: (g,))
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward_fn(g: np.ndarray):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, [x], backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _check4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return make_result(out, [x], backward_fn)


# --------------------------------------------------------------------------
# Channel bookkeeping


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    for p in parts:
        _check4(p, "concat_channels")
    n, _, h, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(f"cannot concatenate {p.shape} with {parts[0].shape}")
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward_fn(g: np.ndarray):
        return [g[:, bounds[k] : bounds[k + 1]] for k in range(len(parts))]

    return make_result(out, list(parts), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check4(x, "slice_channels")
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] outside 0..{c}")

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), [x], backward_fn)


# --------------------------------------------------------------------------
# Elementwise and normalisation


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _record_pattern(mask)
    return make_result(np.where(mask, x.data, 0.0), [x], lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, [a, b], lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, [x], lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    return make_result(np.asarray(x.data.sum()), [x], lambda g: (np.full_like(x.data, float(g)),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return make_result(a.data * b.data, [a, b], lambda g: (g * b.data, g * a.data))


BN_EPS = 1e-5


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels, dtype=DTYPE), np.ones(channels, dtype=DTYPE))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation; train mode uses batch moments and updates ``running``."""
    _check4(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean = (1 - running.momentum) * running.mean + running.momentum * mean
        running.var = (1 - running.momentum) * running.var + running.momentum * var * m / (m - 1)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * g_ + b_

        def backward_fn(g: np.ndarray):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * g_
            gx = (
                inv[None, :, None, None]
                / m
                * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            )
            return gx, ggamma, gbeta

        return make_result(out, [x, gamma, beta], backward_fn)
    if mode != "eval":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = 1.0 / np.sqrt(running.var + eps)
    xhat = (x.data - running.mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * g_ + b_

    def backward_eval(g: np.ndarray):
        return g * g_ * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out, [x, gamma, beta], backward_eval)


def dropout(x: Tensor, rate: float, rng: RngState | None, mode: str = "train") -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return make_result(x.data.copy(), [x], lambda g: (g,))
    if rng is None:
        raise ValueError("train-mode dropout needs an RngState")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, [x], lambda g: (g * keep,))


# --------------------------------------------------------------------------
# Head and losses


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer on N x C x 1 x 1 features with a (C_out, C) weight."""
    _check4(x, "fully_connected")
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise ShapeError(f"fully_connected expects 1x1 spatial input, got {h}x{w}")
    if weight.data.ndim != 2 or weight.shape[1] != c:
        raise ShapeError(f"weight shape {weight.shape} incompatible with {c} input features")
    co = weight.shape[0]
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"bias shape {bias.shape} does not match {co} outputs")
    flat = x.data[:, :, 0, 0]
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g: np.ndarray):
        g2 = g[:, :, 0, 0]
        gx = (g2 @ weight.data)[:, :, None, None]
        gw = g2.T @ flat
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = [x, weight] + ([bias] if bias is not None else [])
    return make_result(out[:, :, None, None], parents, backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis at every (n, h, w)."""
    _check4(x, "softmax")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g: np.ndarray):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, [x], backward_fn)


LOG_CLAMP = 1e-12


def cross_entropy_loss(
    probs: Tensor, targets, class_weights: Sequence[float] | None = None
) -> Tensor:
    """Mean of -w[t] * log(p_t) over every (n[, h, w]) location.

    ``targets`` is an integer array of shape (N,) or (N, H, W).
    """
    _check4(probs, "cross_entropy_loss")
    n, c, h, w = probs.shape
    t = np.asarray(targets)
    if t.ndim == 1:
        t = t.reshape(n, 1, 1) if (h, w) == (1, 1) else t
    if t.shape != (n, h, w):
        raise ShapeError(f"targets shape {np.asarray(targets).shape} does not match probabilities {probs.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise ValueError("targets must be integer class ids")
        t = t.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target class outside [0, {c})")
    wts = np.ones(c, dtype=DTYPE) if class_weights is None else np.asarray(class_weights, dtype=DTYPE)
    if wts.shape != (c,):
        raise ShapeError(f"class weights must have length {c}")
    pt = np.take_along_axis(probs.data, t[:, None], axis=1)[:, 0]
    clamped = np.maximum(pt, LOG_CLAMP)
    wt = wts[t]
    count = t.size
    loss = -(wt * np.log(clamped)).sum() / count

    def backward_fn(g: np.ndarray):
        gp = np.zeros_like(probs.data)
        live = pt > LOG_CLAMP
        local = np.where(live, -wt / np.where(live, pt, 1.0), 0.0) * (float(g) / count)
        np.put_along_axis(gp, t[:, None], local[:, None], axis=1)
        return (gp,)

    return make_result(np.asarray(loss), [probs], backward_fn)


def he_normal(rng: RngState, shape: Sequence[int], fan_in: int) -> np.ndarray:
    return rng.normal(tuple(shape), scale=math.sqrt(2.0 / fan_in))


def crop2d(x: Tensor, height: int, width: int) -> Tensor:
    """Keep the top-left ``height`` x ``width`` window."""
    _check4(x, "crop2d")
    n, c, h, w = x.shape
    if height > h or width > w:
        raise GeometryError(f"cannot crop {h}x{w} to {height}x{width}")
    if (height, width) == (h, w):
        return x

    def backward_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, :, :height, :width] = g
        return (gx,)

    return make_result(x.data[:, :, :height, :width].copy(), [x], backward_fn)

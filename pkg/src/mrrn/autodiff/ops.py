"""Differentiable kernels over ``(n, c, h, w)`` tensors.

Each op computes its forward result with NumPy and, when a tape is active and
some input requires a gradient, records a closure implementing its adjoint.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, current_tape

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_SHIFTS_3x3 = [(di, dj) for di in range(3) for dj in range(3)]


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------- kink tracking

class KinkMonitor:
    """Smallest distance to a non-differentiable point seen while active."""

    def __init__(self):
        self.margin = np.inf

    def observe(self, value: float) -> None:
        if value < self.margin:
            self.margin = float(value)


_monitors: list[KinkMonitor] = []


@contextlib.contextmanager
def track_kinks() -> Iterator[KinkMonitor]:
    mon = KinkMonitor()
    _monitors.append(mon)
    try:
        yield mon
    finally:
        _monitors.remove(mon)


def _report_kink(value: float) -> None:
    for mon in _monitors:
        mon.observe(value)


# --------------------------------------------------------------------------- helpers

def _emit(name: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = current_tape()
    if needs and tape is not None:
        tape.record(name, inputs, out, backward)
    return out


def _check4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what}: expected a 4-D (n, c, h, w) tensor, got shape {t.shape}")


# --------------------------------------------------------------------------- elementwise / structural

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _emit("add", (a, b), a.data + b.data, backward)


def sum_all(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar ``sum(x)`` or ``sum(x * weights)`` for a constant ``weights``."""
    if weights is None:
        out = np.asarray(x.data.sum(), dtype=x.dtype)

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)
    else:
        w = np.asarray(weights, dtype=x.dtype)
        if w.shape != x.shape:
            raise ShapeError(f"sum_all: weights shape {w.shape} != input shape {x.shape}")
        out = np.asarray((x.data * w).sum(), dtype=x.dtype)

        def backward(g):
            return (g * w,)

    return _emit("sum", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if _monitors:
        _report_kink(np.abs(xd).min() if xd.size else np.inf)
    mask = xd > 0
    out = np.where(mask, xd, 0).astype(xd.dtype, copy=False)

    def backward(g):
        return (np.where(mask, g, 0).astype(g.dtype, copy=False),)

    return _emit("relu", (x,), out, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4d(a, "concat_channels")
    _check4d(b, "concat_channels")
    for axis, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {label} mismatch ({a.shape[axis]} vs {b.shape[axis]})"
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _emit("concat", (a, b), out, backward)


# --------------------------------------------------------------------------- convolution

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding, kernel 1 or 3.

    The 3x3 case works on the zero-padded input flattened to rows of channels
    (``n * (h+2) * (w+2)``, ``c``): each kernel tap is then a contiguous row
    offset, so the convolution is nine plain matmuls with no im2col copy.
    Rows whose window wraps into the next image only feed discarded outputs.
    """
    _check4d(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    n, c, h, w = x.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d: kernel size must be 1 or 3, got {k}x{k2}")
    if c != c_in:
        raise ShapeError(f"conv2d: input channels {c} != weight c_in {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    dtype = x.dtype
    wd = weight.data.astype(dtype, copy=False)
    if k == 1:
        rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
        w1 = wd[:, :, 0, 0]
        out_rows = rows @ w1.T
        if bias is not None:
            out_rows += bias.data
        out = out_rows.reshape(n, h, w, c_out).transpose(0, 3, 1, 2)

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, c_out)
            dw = (g2.T @ rows).reshape(weight.shape) if weight.requires_grad else None
            db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
            dx = (g2 @ w1).reshape(n, h, w, c).transpose(0, 3, 1, 2) if x.requires_grad else None
            return (dx, dw, db) if bias is not None else (dx, dw)
    else:
        hp, wp = h + 2, w + 2
        total = n * hp * wp
        offsets = [di * wp + dj for di, dj in _SHIFTS_3x3]
        m = total - offsets[-1]
        xp = np.zeros((n, hp, wp, c), dtype=dtype)
        xp[:, 1:-1, 1:-1, :] = x.data.transpose(0, 2, 3, 1)
        xflat = xp.reshape(total, c)
        taps = [np.ascontiguousarray(wd[:, :, di, dj].T) for di, dj in _SHIFTS_3x3]  # (c, c_out)
        acc = np.zeros((total, c_out), dtype=dtype)
        head = acc[:m]
        for off, tap in zip(offsets, taps):
            head += xflat[off:off + m] @ tap
        if bias is not None:
            acc += bias.data
        out = acc.reshape(n, hp, wp, c_out)[:, :h, :w, :].transpose(0, 3, 1, 2)

        def backward(g):
            gp = np.zeros((n, hp, wp, c_out), dtype=dtype)
            gp[:, :h, :w, :] = g.transpose(0, 2, 3, 1)
            gflat = gp.reshape(total, c_out)[:m]
            dw = db = dx = None
            if weight.requires_grad:
                dw = np.empty(weight.shape, dtype=dtype)
                for (di, dj), off in zip(_SHIFTS_3x3, offsets):
                    dw[:, :, di, dj] = gflat.T @ xflat[off:off + m]
            if bias is not None and bias.requires_grad:
                db = gflat.sum(axis=0)
            if x.requires_grad:
                dxp = np.zeros((total, c), dtype=dtype)
                for off, tap in zip(offsets, taps):
                    dxp[off:off + m] += gflat @ tap.T
                dx = dxp.reshape(n, hp, wp, c)[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)
            return (dx, dw, db) if bias is not None else (dx, dw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit("conv2d", inputs, out, backward)


# --------------------------------------------------------------------------- batch normalization

@dataclass
class BatchNormStats:
    """Running per-channel statistics; ``count`` is the number of batches folded in."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, channels: int, dtype=np.float64) -> "BatchNormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), 0)

    @property
    def populated(self) -> bool:
        return self.count > 0

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(self.mean.copy(), self.var.copy(), self.count)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    running: Optional[BatchNormStats] = None,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    _check4d(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    xd = x.data
    bshape = (1, c, 1, 1)
    if mode == "train":
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(bshape)
        if running is not None:
            running.mean = momentum * running.mean + (1 - momentum) * mean
            running.var = momentum * running.var + (1 - momentum) * var
            running.count += 1
    elif mode == "eval":
        if running is None or not running.populated:
            raise ValueError("batch_norm: eval mode needs populated running statistics")
        count = None
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(xd.dtype)
        xhat = (xd - running.mean.astype(xd.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    else:
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")

    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if count is None:
                dx = dxhat * inv_std.reshape(bshape)
            else:
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
                dx = (inv_std.reshape(bshape) / count) * (count * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _emit("batch_norm", (x, gamma, beta), out, backward)


# --------------------------------------------------------------------------- resampling

def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max-pool, stride 2. Ties resolve to the first element in row-major order."""
    _check4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial size must be even, got {h}x{w}")
    xd = x.data
    # window elements in row-major scan order
    quad = [xd[:, :, 0::2, 0::2], xd[:, :, 0::2, 1::2], xd[:, :, 1::2, 0::2], xd[:, :, 1::2, 1::2]]
    out = np.maximum(np.maximum(quad[0], quad[1]), np.maximum(quad[2], quad[3]))
    if _monitors and out.size:
        top2 = np.sort(np.stack(quad, axis=-1), axis=-1)[..., -2:]
        gap = top2[..., 1] - top2[..., 0]
        # exact ties come from shared upstream values and stay tied under perturbation
        gap = gap[gap > 0]
        _report_kink(gap.min() if gap.size else np.inf)

    def backward(g):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for q, (di, dj) in zip(quad, ((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (q == out) & ~taken
            taken |= hit
            dx[:, :, di::2, dj::2] = np.where(hit, g, 0)
        return (dx,)

    return _emit("maxpool2x2", (x,), out, backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel into a ``factor`` x ``factor`` block."""
    _check4d(x, "upsample_nearest")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    f = factor
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def backward(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _emit("upsample", (x,), out, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return upsample_nearest(x, 2)


# --------------------------------------------------------------------------- loss

def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_ce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of ``softmax(logits)`` against integer labels.

    The scalar loss is always float64.
    """
    _check4d(logits, "softmax_ce_loss")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"softmax_ce_loss: target shape {target.shape} != {(n, h, w)}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(
            f"softmax_ce_loss: labels must lie in [0, {k}), got range [{target.min()}, {target.max()}]"
        )
    t = target.astype(np.intp)[:, None]
    # the reduction runs in float64 whatever the working precision
    logp = log_softmax(logits.data.astype(np.float64), axis=1)
    npix = n * h * w
    loss = np.asarray(-np.take_along_axis(logp, t, axis=1).sum() / npix)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=1) - 1, axis=1)
        return ((grad * (float(g) / npix)).astype(logits.dtype, copy=False),)

    return _emit("softmax_ce", (logits,), loss, backward)

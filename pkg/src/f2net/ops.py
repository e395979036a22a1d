"""Differentiable operators on channel-last tensors.

Each op computes its forward value with numpy and registers an analytic
backward through :func:`f2net.tensor.make_op`. Broadcasting is deliberately
narrow: an operand may be ``1 x 1 x C`` or ``H x W x 1`` against an
``H x W x C`` partner (likewise ``1 x C`` / ``N x 1`` against ``N x C``);
anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

from contextlib import contextmanager
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_op

__all__ = [
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "conv2d",
    "conv_output_size",
    "sigmoid",
    "relu",
    "add",
    "mul",
    "scale",
    "concat",
    "slice",
    "sum",
    "global_avg_pool",
    "fully_connected",
    "bilinear_upsample",
    "upsample_matrix",
]

UPSAMPLE_FACTORS = (2, 4, 8)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return make_op(A @ B, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return make_op(x.data.T.copy(), (x,), lambda g: (g.T.copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return make_op(out, (x,), lambda g: (g.reshape(src),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_op(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


_branch_log: Optional[list] = None


@contextmanager
def record_branches():
    """Collect the piecewise choices (ReLU masks, loss clamps) made inside the block.

    Yields a list that receives one boolean array per non-smooth op, in
    execution order. Used by finite-difference checks to detect kinks.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def note_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(mask, dtype=bool))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return make_op(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def _broadcast_shape(sa: tuple, sb: tuple, opname: str) -> tuple:
    if sa == sb:
        return sa
    if len(sa) == len(sb) and len(sa) >= 2:
        for small, big in ((sa, sb), (sb, sa)):
            if all(d == 1 for d in small[:-1]) and small[-1] == big[-1]:
                return big
            if small[-1] == 1 and small[:-1] == big[:-1]:
                return big
    raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return make_op(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    A, B = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * B, A.shape) if a.requires_grad else None
        gb = _unbroadcast(g * A, B.shape) if b.requires_grad else None
        return (ga, gb)

    return make_op(A * B, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    total = np.array(x.data.sum(), dtype=x.data.dtype)
    return make_op(total, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    axis = axis % x.ndim
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis of size {n}")
    index = [np.s_[:]] * x.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_op(x.data[index].copy(), (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"global_avg_pool expects H x W x C, got {x.shape}")
    h, w, c = x.shape
    out = x.data.mean(axis=(0, 1), keepdims=True)

    def bw(g):
        return (np.broadcast_to(g / (h * w), (h, w, c)).copy(),)

    return make_op(out, (x,), bw)


def fully_connected(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of a ``1 x 1 x C`` vector with ``weights`` of shape ``C x C'``."""
    if x.shape[:2] != (1, 1) or x.ndim != 3 or weights.ndim != 2 or weights.shape[0] != x.shape[2]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weights {weights.shape}")
    if bias is not None and bias.shape != (weights.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} vs weights {weights.shape}")
    v = x.data.reshape(1, -1)
    W = weights.data
    out = v @ W
    if bias is not None:
        out = out + bias.data
    cin = x.shape[2]

    def bw(g):
        g2 = g.reshape(1, -1)
        gx = (g2 @ W.T).reshape(1, 1, cin) if x.requires_grad else None
        gw = v.T @ g2 if weights.requires_grad else None
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.reshape(-1))

    parents = (x, weights) if bias is None else (x, weights, bias)
    return make_op(out.reshape(1, 1, -1), parents, bw)


_ACCUMULATE_LIMIT = 1 << 18   # elements in the per-tap product buffer


def conv_output_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of ``H x W x Cin`` with a ``kh x kw x Cin x Cout`` kernel."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2] != x.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError("conv2d: stride and dilation must be >= 1 and pad >= 0")
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(w, kw, stride, pad, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"conv2d: geometry gives non-positive output {ho}x{wo} "
            f"(input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}, dilation {dilation})"
        )
    if pad:
        xp = np.zeros((h + 2 * pad, w + 2 * pad, cin), dtype=x.data.dtype)
        xp[pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data
    cols = np.empty((ho, wo, kh * kw, cin), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i * kw + j] = xp[r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    taps = kh * kw * cin
    cols = cols.reshape(ho * wo, taps)
    kmat = kernel.data.reshape(taps, cout)
    # taps accumulate one at a time in (row, col, channel) order, so every
    # output equals a sequential scalar sum bit for bit; add.accumulate is
    # strictly sequential, unlike add.reduce
    if ho * wo * taps * cout <= _ACCUMULATE_LIMIT:
        out = np.add.accumulate(cols[:, :, None] * kmat[None], axis=1)[:, -1]
    else:
        out = np.zeros((ho * wo, cout), dtype=x.data.dtype)
        for t in range(taps):
            out += cols[:, t:t + 1] * kmat[t]
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(ho * wo, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(ho, wo, kh * kw, cin)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for idx in range(kh * kw):
                r0, c0 = (idx // kw) * dilation, (idx % kw) * dilation
                dxp[r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride, :] += dcols[:, :, idx, :]
            gx = dxp[pad:pad + h, pad:pad + w, :].copy() if pad else dxp
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        if bias is None:
            return (gx, gk)
        return (gx, gk, g2.sum(axis=0))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_op(out.reshape(ho, wo, cout), parents, bw)


@lru_cache(maxsize=None)
def _upsample_matrix(n: int, factor: int) -> np.ndarray:
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    m.setflags(write=False)
    return m


def upsample_matrix(n: int, factor: int) -> np.ndarray:
    """Row-stochastic ``(n*factor) x n`` matrix of half-pixel bilinear weights."""
    return _upsample_matrix(n, factor)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Half-pixel (align_corners=False) bilinear upsampling of ``H x W x C``."""
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"bilinear_upsample: factor must be one of {UPSAMPLE_FACTORS}, got {factor}")
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample expects H x W x C, got {x.shape}")
    h, w, _ = x.shape
    mh = _upsample_matrix(h, factor).astype(x.data.dtype)
    mw = _upsample_matrix(w, factor).astype(x.data.dtype)
    out = np.einsum("ih,hwc->iwc", mh, x.data)
    out = np.einsum("jw,iwc->ijc", mw, out)

    def bw(g):
        gx = np.einsum("ijc,jw->iwc", g, mw)
        return (np.einsum("iwc,ih->hwc", gx, mh),)

    return make_op(out, (x,), bw)

"""Differentiable operations on :class:`Tensor`.

Convolutions build an im2col matrix from a ``sliding_window_view`` and hand
it to a single GEMM; the adjoint scatter (col2im) is a K*K loop of strided
adds. The public ``conv2d``/``conv2d_transpose`` take NCHW tensors; the
networks call the channels-last cores directly. Padding is always zeros.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        k = float(b)
        a = as_tensor(a)
        return Tensor._from_op(a.data * a.data.dtype.type(k), (a,), lambda g: (g * k,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def abs(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)
    return Tensor._from_op(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def crop(x: Tensor, idx) -> Tensor:
    """Basic (slice) indexing; the gradient scatters back into zeros."""
    x = as_tensor(x)
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] += g
        return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), bw)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat along axis {axis}: {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return Tensor._from_op(out, tuple(tensors), bw)


def concat_channels(tensors) -> Tensor:
    """Concatenate NCHW tensors along C."""
    return concat(tensors, axis=1)


def permute(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._from_op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def to_nhwc(x: Tensor) -> Tensor:
    return permute(x, (0, 2, 3, 1))


def to_nchw(x: Tensor) -> Tensor:
    return permute(x, (0, 3, 1, 2))


def _upsample2d(x: Tensor, factor: int, h_axis: int) -> Tensor:
    x = as_tensor(x)
    shp = x.shape
    # insert a repeat axis after each spatial axis and broadcast into it
    exp = shp[:h_axis + 1] + (1,) + shp[h_axis + 1:h_axis + 2] + (1,) + shp[h_axis + 2:]
    full = shp[:h_axis + 1] + (factor,) + shp[h_axis + 1:h_axis + 2] + (factor,) + shp[h_axis + 2:]
    out_shape = shp[:h_axis] + (shp[h_axis] * factor, shp[h_axis + 1] * factor) + shp[h_axis + 2:]
    out = np.broadcast_to(x.data.reshape(exp), full).reshape(out_shape)

    def bw(g):
        return (g.reshape(full).sum(axis=(h_axis + 1, h_axis + 3)),)

    return Tensor._from_op(out, (x,), bw)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of an NCHW tensor by an integer factor."""
    return _upsample2d(x, factor, 2)


def nearest_upsample_nhwc(x: Tensor, factor: int) -> Tensor:
    return _upsample2d(x, factor, 1)


# activations ---------------------------------------------------------------

def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x)).

    With n = exp(x), tanh(log(1 + n)) = n(n + 2) / (n(n + 2) + 2); x is capped
    at 20 before exp, where the ratio is already 1 in float32.
    """
    x = as_tensor(x)
    n = np.exp(np.minimum(x.data, 20))
    q = n * (n + 2)
    tn = q / (q + 2)
    out = x.data * tn

    def bw(g):
        sig = n / (1 + n)
        return (g * (tn + x.data * (1 - tn * tn) * sig),)

    return Tensor._from_op(out, (x,), bw)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return Tensor._from_op(x.data * scale, (x,), lambda g: (g * scale,))


# dense ---------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, in) @ w (in, out) + b (out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    parents: tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(out, parents, bw)



# convolution ---------------------------------------------------------------
#
# The core kernels are channels-last (NHWC): the im2col matrix then has
# contiguous channel runs and the output of the GEMM is already NHWC. Kernels
# keep the (O, I, K, K) layout in both cases.

def _cols(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """im2col for NHWC input: (N, Ho, Wo, k, k, C), contiguous."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # N, Ho', Wo', C, k, k
    if stride > 1:
        win = win[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _uncols(cols: np.ndarray, out_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_cols`: scatter-add (N, Ho, Wo, k, k, C) back onto an NHWC canvas."""
    n, ho, wo, k, _, c = cols.shape
    hp = max(out_hw[0] + 2 * padding, (ho - 1) * stride + k)
    wp = max(out_hw[1] + 2 * padding, (wo - 1) * stride + k)
    canvas = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, :, :, i, j]
    return canvas[:, padding:padding + out_hw[0], padding:padding + out_hw[1]]


def _check_conv(xshape, w: Tensor, b, in_axis: int, op: str, cin: int) -> None:
    if len(xshape) != 4 or w.ndim != 4:
        raise ShapeError(f"{op}: expected 4-D input and kernel, got input {xshape} and kernel {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: kernel must be square, got kernel {w.shape} for input {xshape}")
    if cin != w.shape[in_axis]:
        raise ShapeError(f"{op}: input {xshape} has {cin} channels but kernel {w.shape} expects {w.shape[in_axis]}")
    if b is not None and b.shape != (w.shape[1 - in_axis],):
        raise ShapeError(f"{op}: bias {b.shape} does not match kernel {w.shape}")


def conv2d_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (N, H, W, I), w: (O, I, K, K), b: (O,) -> (N, Ho, Wo, O)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.shape, w, b, 1, "conv2d", x.shape[-1] if x.ndim == 4 else -1)
    o, c, k, _ = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got kernel {w.shape}")
    n, h, wd, _ = x.shape
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape} with padding {padding}")
    cols = _cols(x.data, k, stride, padding)
    ho, wo = cols.shape[1:3]
    cols2 = cols.reshape(n * ho * wo, k * k * c)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = cols2 @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, o)
        gw = (cols2.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad and stride == 1 and padding <= k - 1:
            # full correlation with the flipped kernel; cheaper than col2im
            wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
            gcols = _cols(g, k, 1, k - 1 - padding)
            gx = (gcols.reshape(-1, k * k * o) @ wflip).reshape(n, h, wd, c)
        elif x.requires_grad:
            gx = _uncols((g2 @ wmat.T).reshape(n, ho, wo, k, k, c), (h, wd), stride, padding)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, bw)


def conv2d_transpose_nhwc(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d_nhwc` in its input. x: (N, H, W, I), w: (I, O, K, K), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x.shape, w, b, 0, "conv2d_transpose", x.shape[-1] if x.ndim == 4 else -1)
    if stride < 1:
        raise ShapeError(f"conv2d_transpose: stride must be >= 1, got {stride}")
    i_ch, o, k, _ = w.shape
    n, h, wd, _ = x.shape
    ho, wo = (h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: input {x.shape} and kernel {w.shape} give empty output")
    # same GEMM matrix conv2d would use to map O channels to I channels
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * o, i_ch)
    x2 = x.data.reshape(-1, i_ch)
    out = _uncols((x2 @ wmat.T).reshape(n, h, wd, k, k, o), (ho, wo), stride, padding)
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        cols = _cols(g, k, stride, padding)[:, :h, :wd].reshape(-1, k * k * o)
        gw = (cols.T @ x2).reshape(k, k, o, i_ch).transpose(3, 2, 0, 1)
        gx = (cols @ wmat).reshape(n, h, wd, i_ch) if x.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, o).sum(axis=0)

    return Tensor._from_op(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation on NCHW input. x: (N, I, H, W), w: (O, I, K, K), b: (O,)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input, got input {x.shape} and kernel {as_tensor(w).shape}")
    _check_conv(x.shape, as_tensor(w), b, 1, "conv2d", x.shape[1])
    return to_nchw(conv2d_nhwc(to_nhwc(x), w, b, stride, padding))


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution on NCHW input. x: (N, I, H, W), w: (I, O, K, K), b: (O,).

    The kernel is the array conv2d would use to map O channels to I channels,
    so ``<conv2d(u, w), y> == <u, conv2d_transpose(y, w)>`` for matching geometry.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transpose: expected 4-D input, got input {x.shape} and kernel {as_tensor(w).shape}")
    _check_conv(x.shape, as_tensor(w), b, 0, "conv2d_transpose", x.shape[1])
    return to_nchw(conv2d_transpose_nhwc(to_nhwc(x), w, b, stride, padding))

"""Differentiable operations used by the generator, discriminator and losses.

Every function accepts :class:`Tensor` objects or plain arrays and returns a
new Tensor.  Gradient rules are closures recorded on the active tape.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from lapgsr.autograd.tensor import Tensor, as_tensor, record
from lapgsr.errors import ShapeError

LEAKY_SLOPE = 0.2
INSTANCE_NORM_EPS = 1e-5
KEYS_A = -0.5


def _same_shape(op, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ, {a.shape} vs {b.shape}",
                         expected=a.shape, got=b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return record("mul", Tensor(a.data * b.data), (a, b),
                  lambda g: (g * b.data, g * a.data))


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    f = x.data.dtype.type(factor)
    return record("scale", Tensor(x.data * f), (x,), lambda g: (g * f,))


def shift(x, offset: float) -> Tensor:
    x = as_tensor(x)
    return record("shift", Tensor(x.data + x.data.dtype.type(offset)), (x,), lambda g: (g,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return record("square", Tensor(x.data * x.data), (x,), lambda g: (2 * g * x.data,))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``; the derivative at 0 is taken as 1."""
    x = as_tensor(x)
    s = x.data.dtype.type(slope)
    # ufuncs keep the operand's memory layout (np.where would force C order)
    out = np.maximum(x.data, x.data * s)
    factor = (x.data >= 0) * (1 - s) + s
    return record("leaky_relu", Tensor(out), (x,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record("relu", Tensor(np.maximum(x.data, 0)), (x,), lambda g: (g * mask,))


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record("tanh", Tensor(y), (x,), lambda g: (g * (1 - y * y),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0, x.data)
    sig = 0.5 * (1 + np.tanh(0.5 * x.data))
    return record("softplus", Tensor(out), (x,), lambda g: (g * sig,))


def clamp(x, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record("clamp", Tensor(np.clip(x.data, lo, hi)), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(dtype=np.float64))
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = Tensor(x.data.mean(dtype=np.float64))
    return record("mean", out, (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def mse(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size
    out = Tensor(np.mean(np.square(diff, dtype=np.float64)))

    def vjp(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return record("mse", out, (pred, target), vjp)


# ---------------------------------------------------------------- structure

def concat_channels(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial extents differ, {a.shape} vs {b.shape}",
                         expected=a.shape, got=b.shape)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat", Tensor(out), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def instance_norm(x, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Normalize each (batch, channel) slice to zero mean, unit variance; no affine terms."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ShapeError(f"instance_norm needs a non-empty 4-d tensor, got {x.shape}",
                         got=x.shape)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gy = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return record("instance_norm", Tensor(y), (x,), vjp)


# ---------------------------------------------------------------- convolution

def _padding4(padding) -> tuple[int, int, int, int]:
    if np.isscalar(padding):
        p = int(padding)
        return p, p, p, p
    p = tuple(int(v) for v in padding)
    if len(p) == 2:
        return p[0], p[0], p[1], p[1]
    if len(p) == 4:
        return p
    raise ValueError(f"padding must be an int, (ph, pw) or (top, bottom, left, right); got {padding}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp is padded NHWC; columns are ordered (kernel row, kernel col, channel)
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hspan:stride, j:j + wspan:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x, weight, bias=None, stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation, NCHW input and (out, in, kh, kw) weights.

    ``padding`` is zero padding: an int, ``(ph, pw)``, or
    ``(top, bottom, left, right)`` for asymmetric cases.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}",
                         got=(x.shape, weight.shape))
    n, c, h, w = x.shape
    o, cin, kh, kw = weight.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cin}",
                         expected=cin, got=c)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels",
                             expected=(o,), got=bias.shape)
    pt, pb, pl, pr = _padding4(padding)
    ho = (h + pt + pb - kh) // stride + 1
    wo = (w + pl + pr - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}", got=(h, w))

    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    geom = (n, c, h, w, o, kh, kw, pt, pl, ho, wo)
    impl = _conv_flat if stride == 1 else _conv_im2col
    y, vjp = impl(xp, x, weight, bias, stride, geom)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", Tensor(y), inputs, vjp)


def _conv_flat(xp, x, weight, bias, stride, geom):
    # Stride 1: on the flattened padded NHWC grid every kernel tap is a fixed
    # row offset, so each tap is one GEMM on a zero-copy slice.  Rows that
    # land on padding are computed and then discarded.
    n, c, h, w, o, kh, kw, pt, pl, ho, wo = geom
    hp, wp = xp.shape[1:3]
    xf = xp.reshape(-1, c)
    rows = xf.shape[0]
    valid = rows - ((kh - 1) * wp + (kw - 1))
    taps = [(i * wp + j, np.ascontiguousarray(weight.data[:, :, i, j].T))
            for i in range(kh) for j in range(kw)]

    full = np.zeros((rows, o), dtype=xp.dtype)
    acc = full[:valid]
    tmp = np.empty((valid, o), dtype=xp.dtype)
    for off, wt in taps:
        np.matmul(xf[off:off + valid], wt, out=tmp)
        acc += tmp
    if bias is not None:
        acc += bias.data
    # contiguous NHWC memory behind an NCHW view; elementwise ops preserve it
    y = np.ascontiguousarray(full.reshape(n, hp, wp, o)[:, :ho, :wo, :]).transpose(0, 3, 1, 2)

    def vjp(g):
        gfull = np.zeros((n, hp, wp, o), dtype=xp.dtype)
        gfull[:, :ho, :wo, :] = g.transpose(0, 2, 3, 1)
        gf = gfull.reshape(rows, o)[:valid]
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k, (off, _) in enumerate(taps):
                i, j = divmod(k, kw)
                gw[:, :, i, j] = (xf[off:off + valid].T @ gf).T
        if x.requires_grad:
            gxf = np.zeros((rows, c), dtype=xp.dtype)
            tmpx = np.empty((valid, c), dtype=xp.dtype)
            for off, wt in taps:
                np.matmul(gf, wt.T, out=tmpx)
                gxf[off:off + valid] += tmpx
            gx = np.ascontiguousarray(gxf.reshape(n, hp, wp, c)[:, pt:pt + h, pl:pl + w, :])
            gx = gx.transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    return y, vjp


def _conv_im2col(xp, x, weight, bias, stride, geom):
    n, c, h, w, o, kh, kw, pt, pl, ho, wo = geom
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = _im2col(xp, kh, kw, stride, ho, wo) @ wmat
    if bias is not None:
        out += bias.data
    y = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = None
        if weight.requires_grad:
            cols = _im2col(xp, kh, kw, stride, ho, wo)
            gw = (cols.T @ gm).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
            del cols
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + hspan:stride, j:j + wspan:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return y, vjp


# ---------------------------------------------------------------- resampling

def keys_kernel(t, a: float = KEYS_A):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    near = (a + 2) * t**3 - (a + 3) * t**2 + 1
    far = a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bicubic resampling matrix.

    Half-pixel centres, replicate boundary, no antialiasing filter, so
    every row sums to one.
    """
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(m, (rows, idx), keys_kernel(k - frac))
    m.setflags(write=False)
    return m


def _resize_extent(n: int, factor: float, axis: str) -> int:
    out = n * factor
    if out < 1 or abs(out - round(out)) > 1e-9:
        raise ShapeError(f"bicubic_resize: {axis} extent {n} is not divisible for scale {factor}",
                         got=n)
    return int(round(out))


def bicubic_resize(x, scale: float) -> Tensor:
    """Separable Keys bicubic resize (a = -0.5) of the two trailing axes.

    The pyramid uses scale 2.0 and 0.5; other factors are accepted when
    both extents map to whole numbers.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bicubic_resize expects a 4-d tensor, got {x.shape}", got=x.shape)
    h, w = x.shape[2:]
    ho = _resize_extent(h, scale, "height")
    wo = _resize_extent(w, scale, "width")
    dt = x.data.dtype
    mh = resample_matrix(h, ho).astype(dt)
    mw = resample_matrix(w, wo).astype(dt)
    y = np.matmul(mh, np.matmul(x.data, mw.T))
    return record("bicubic_resize", Tensor(y), (x,),
                  lambda g: (np.matmul(mh.T, np.matmul(g, mw)),))

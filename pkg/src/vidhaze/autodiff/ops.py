"""Differentiable operators recorded on the gradient tape.

Every public function takes/returns Tensor (python scalars are promoted to
constant leaves) and registers a single tape node whose VJP is the
operator-level vector-Jacobian product.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, ensure_finite, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    ensure_finite("div", out.data)

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return record("neg", out, (a,), lambda g: (-g,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return record("abs", out, (a,), lambda g: (g * sign,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    ensure_finite("exp", out.data)
    return record("exp", out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    ensure_finite("log", out.data)
    return record("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    ensure_finite("sqrt", out.data)

    def vjp(g):
        return (g / (2.0 * np.maximum(out.data, np.finfo(out.data.dtype).tiny)),)

    return record("sqrt", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= 0
    out = Tensor(np.where(mask, a.data, slope * a.data))
    return record("leaky_relu", out, (a,), lambda g: (np.where(mask, g, slope * g),))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = Tensor(np.where(take_a, a.data, b.data))

    def vjp(g):
        ga = _unbroadcast(np.where(take_a, g, 0.0), a.shape)
        gb = _unbroadcast(np.where(take_a, 0.0, g), b.shape)
        return ga, gb

    return record("maximum", out, (a, b), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return record("clip", out, (a,), lambda g: (np.where(mask, g, 0.0),))


def stop_gradient(a) -> Tensor:
    """Detach: a constant copy through which no gradient flows."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record("mean", out, (a,), vjp)


def _reduce_extreme(a, axis: int, keepdims: bool, largest: bool, name: str) -> Tensor:
    """Shared min/max reduction; gradient routed to the first extremal element."""
    a = as_tensor(a)
    ax = axis % a.ndim
    fn = np.argmax if largest else np.argmin
    idx = fn(a.data, axis=ax)
    taken = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    out = Tensor(taken if keepdims else np.squeeze(taken, axis=ax))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, ax), g, axis=ax)
        return (gx,)

    return record(name, out, (a,), vjp)


def reduce_max(a, axis: int, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, True, "reduce_max")


def reduce_min(a, axis: int, keepdims: bool = False) -> Tensor:
    return _reduce_extreme(a, axis, keepdims, False, "reduce_min")


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in ts], axis=axis))

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record("stack", out, ts, vjp)


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing; the VJP scatters into a zero tensor."""
    a = as_tensor(a)
    out = Tensor(a.data[key])

    def vjp(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        return (gx,)

    return record("getitem", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", out, (a, b), vjp)


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    Hp, Wp = x.shape[1], x.shape[2]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    s0, s1, s2 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(C, Ho, Wo, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * k * k, Ho * Wo)
    return cols, Ho, Wo


def _col2im(cols: np.ndarray, C: int, H: int, W: int, k: int, stride: int, padding: int):
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    x = np.zeros((C, Hp, Wp), dtype=cols.dtype)
    cols = cols.reshape(C, k, k, Ho, Wo)
    for a in range(k):
        for b in range(k):
            x[:, a : a + (Ho - 1) * stride + 1 : stride, b : b + (Wo - 1) * stride + 1 : stride] += cols[:, a, b]
    if padding:
        x = x[:, padding : Hp - padding, padding : Wp - padding]
    return x


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a [C_in,H,W] map with a [C_out,C_in,k,k] kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3:
        raise ValueError(f"conv2d input must be [C,H,W], got rank {x.ndim}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be [C_out,C_in,k,k], got rank {w.ndim}")
    C_out, C_in, kh, kw = w.shape
    if kh != kw:
        raise ValueError(f"conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {kh}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    if x.shape[0] != C_in:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[0]} channels, weight expects {C_in}"
        )
    if x.shape[1] + 2 * padding < kh or x.shape[2] + 2 * padding < kh:
        raise ValueError(
            f"conv2d spatial extent {x.shape[1]}x{x.shape[2]} (padding {padding}) "
            f"smaller than kernel {kh}"
        )
    C, H, W = x.shape
    cols, Ho, Wo = _im2col(x.data, kh, stride, padding)
    w2 = w.data.reshape(C_out, -1)
    out = Tensor((w2 @ cols).reshape(C_out, Ho, Wo))

    def vjp(g):
        g2 = g.reshape(C_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = w2.T @ g2
        gx = _col2im(gcols, C, H, W, kh, stride, padding)
        return gx, gw

    return record("conv2d", out, (x, w), vjp)


def maxpool2d(x, k: int, stride: Optional[int] = None) -> Tensor:
    """Per-window max over [C,H,W]; ties route the gradient to the first
    element in row-major window order."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"maxpool2d input must be [C,H,W], got rank {x.ndim}")
    stride = k if stride is None else stride
    C, H, W = x.shape
    if H < k or W < k:
        raise ValueError(f"maxpool2d window {k} larger than input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    s0, s1, s2 = x.data.strides
    win = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(C, Ho, Wo, k, k),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
        writeable=False,
    ).reshape(C, Ho, Wo, k * k)
    idx = np.argmax(win, axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    rows = (np.arange(Ho) * stride)[None, :, None] + idx // k
    cols = (np.arange(Wo) * stride)[None, None, :] + idx % k
    flat = (rows * W + cols).reshape(C, -1)

    def vjp(g):
        gx = np.zeros((C, H * W), dtype=g.dtype)
        gflat = g.reshape(C, -1)
        for c in range(C):
            np.add.at(gx[c], flat[c], gflat[c])
        return (gx.reshape(C, H, W),)

    return record("maxpool2d", out, (x,), vjp)


def _reflect_coords(c: np.ndarray, n: int):
    """Reflect continuous coordinates into [0, n]; returns (coord, slope)."""
    if n == 0:
        return np.zeros_like(c), np.zeros_like(c)
    period = 2 * n
    m = np.mod(c, period)
    r = np.where(m > n, period - m, m)
    slope = np.where(m > n, -1.0, 1.0)
    return r, slope


def bilinear_sample(x, coords, mode: str = "border") -> Tensor:
    """Sample a [C,H,W] map at continuous pixel positions.

    ``coords`` is [2,H',W'] with coords[0] = x (column) and coords[1] = y
    (row) in input pixel units. Out-of-range behavior: ``border`` clamps to
    the edge, ``zeros`` treats outside as 0, ``reflect`` mirrors.
    Differentiable w.r.t. both the map and the coordinates.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if x.ndim != 3:
        raise ValueError(f"bilinear_sample input must be [C,H,W], got rank {x.ndim}")
    if coords.ndim != 3 or coords.shape[0] != 2:
        raise ValueError(f"bilinear_sample coords must be [2,H',W'], got {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("bilinear_sample coords contain non-finite values")
    if mode not in ("border", "zeros", "reflect"):
        raise ValueError(f"unknown sampling mode {mode!r}")

    C, H, W = x.shape
    out_shape = coords.shape[1:]
    cx = coords.data[0].ravel().astype(x.dtype)
    cy = coords.data[1].ravel().astype(x.dtype)
    flat = x.data.reshape(C, -1)
    ones = np.ones_like(cx)

    if mode == "zeros":
        # Unclamped cell; corners outside the grid contribute zero.
        x0f = np.floor(cx)
        y0f = np.floor(cy)
        fx = cx - x0f
        fy = cy - y0f
        x0 = np.clip(x0f, 0, W - 1).astype(np.intp)
        x1 = np.clip(x0f + 1, 0, W - 1).astype(np.intp)
        y0 = np.clip(y0f, 0, H - 1).astype(np.intp)
        y1 = np.clip(y0f + 1, 0, H - 1).astype(np.intp)
        mx0 = (x0f >= 0) & (x0f <= W - 1)
        mx1 = (x0f + 1 >= 0) & (x0f + 1 <= W - 1)
        my0 = (y0f >= 0) & (y0f <= H - 1)
        my1 = (y0f + 1 >= 0) & (y0f + 1 <= H - 1)
        m00 = (mx0 & my0).astype(x.dtype)
        m01 = (mx1 & my0).astype(x.dtype)
        m10 = (mx0 & my1).astype(x.dtype)
        m11 = (mx1 & my1).astype(x.dtype)
        inside_x = ones
        inside_y = ones
    else:
        if mode == "reflect":
            cx, inside_x = _reflect_coords(cx, W - 1)
            cy, inside_y = _reflect_coords(cy, H - 1)
        else:
            inside_x = ((cx > 0) & (cx < W - 1)).astype(x.dtype)
            inside_y = ((cy > 0) & (cy < H - 1)).astype(x.dtype)
            cx = np.clip(cx, 0.0, W - 1)
            cy = np.clip(cy, 0.0, H - 1)
        x0 = np.minimum(np.floor(cx), max(W - 2, 0)).astype(np.intp)
        y0 = np.minimum(np.floor(cy), max(H - 2, 0)).astype(np.intp)
        x1 = np.minimum(x0 + 1, W - 1)
        y1 = np.minimum(y0 + 1, H - 1)
        fx = cx - x0
        fy = cy - y0
        m00 = m01 = m10 = m11 = ones

    i00 = y0 * W + x0
    i01 = y0 * W + x1
    i10 = y1 * W + x0
    i11 = y1 * W + x1
    v00 = flat[:, i00] * m00
    v01 = flat[:, i01] * m01
    v10 = flat[:, i10] * m10
    v11 = flat[:, i11] * m11

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out_flat = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    out = Tensor(out_flat.reshape((C,) + out_shape))
    del v00, v01, v10, v11  # re-gathered in the VJP; keeps the closure small

    need_x = x.requires_grad
    need_coords = coords.requires_grad

    def vjp(g):
        gf = g.reshape(C, -1)
        gx = gcoords = None
        if need_x:
            gacc = np.zeros((C, H * W), dtype=g.dtype)
            for idx_k, w_k in ((i00, w00 * m00), (i01, w01 * m01),
                               (i10, w10 * m10), (i11, w11 * m11)):
                gv = gf * w_k
                for c in range(C):
                    gacc[c] += np.bincount(idx_k, weights=gv[c], minlength=H * W)
            gx = gacc.reshape(C, H, W)
        if need_coords:
            src = x.data.reshape(C, -1)
            a00 = src[:, i00] * m00
            a01 = src[:, i01] * m01
            a10 = src[:, i10] * m10
            a11 = src[:, i11] * m11
            d_dfx = (1 - fy) * (a01 - a00) + fy * (a11 - a10)
            d_dfy = (1 - fx) * (a10 - a00) + fx * (a11 - a01)
            gcx = (gf * d_dfx).sum(axis=0) * inside_x
            gcy = (gf * d_dfy).sum(axis=0) * inside_y
            gcoords = np.stack([gcx, gcy]).reshape((2,) + out_shape)
        return gx, gcoords

    return record("bilinear_sample", out, (x, coords), vjp)


def window_cosine_attention(q, kv, coords, taps: int, eps: float = 1e-8) -> Tensor:
    """Fused windowed cosine attention: sample keys/values at ``coords``,
    weight by softmax(cos(Q,K)/sqrt(d)) over the taps, and sum the values.

    ``q`` is [d,Hq,Wq]; ``kv`` is [2d,H,W] (keys stacked over values);
    ``coords`` is [2, taps*Hq, Wq], laid out tap-major. One tape node with a
    hand-derived VJP; the sampled stack is kept for the backward pass.
    """
    q, kv, coords = as_tensor(q), as_tensor(kv), as_tensor(coords)
    d = q.shape[0]
    if kv.shape[0] != 2 * d:
        raise ValueError(f"kv must have 2*{d} channels, got {kv.shape[0]}")
    Hq, Wq = q.shape[1], q.shape[2]
    if coords.shape != (2, taps * Hq, Wq):
        raise ValueError(f"coords must be [2,{taps * Hq},{Wq}], got {coords.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ValueError("window_cosine_attention coords contain non-finite values")
    C2, H, W = kv.shape
    N = Hq * Wq

    cx = coords.data[0].ravel().astype(kv.dtype)
    cy = coords.data[1].ravel().astype(kv.dtype)
    inside_x = ((cx > 0) & (cx < W - 1)).astype(kv.dtype)
    inside_y = ((cy > 0) & (cy < H - 1)).astype(kv.dtype)
    cxc = np.clip(cx, 0.0, W - 1)
    cyc = np.clip(cy, 0.0, H - 1)
    x0 = np.minimum(np.floor(cxc), max(W - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(cyc), max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = cxc - x0
    fy = cyc - y0
    i00 = y0 * W + x0
    i01 = y0 * W + x1
    i10 = y1 * W + x0
    i11 = y1 * W + x1
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx

    need_q = q.requires_grad
    need_kv = kv.requires_grad
    need_coords = coords.requires_grad
    scale = 1.0 / math.sqrt(d)
    tiny = np.finfo(kv.dtype).tiny
    M = taps * N

    from . import _kernels

    fast = _kernels.HAVE_NUMBA and not need_coords and kv.dtype == np.float64

    if fast:
        flatT = np.ascontiguousarray(kv.data.reshape(C2, -1).T)
        Q2 = q.data.reshape(d, N)
        QT = np.ascontiguousarray(Q2.T)
        samples = np.empty((M, C2))
        dot_f = np.empty(M)
        kn2_f = np.empty(M)
        _kernels.attention_forward(flatT, i00, i01, i10, i11, w00, w01, w10, w11,
                                   QT, d, samples, dot_f, kn2_f)
        dot = dot_f.reshape(taps, N)
        kn = np.sqrt(kn2_f).reshape(taps, N)
        qn = np.sqrt((Q2 * Q2).sum(axis=0))
        denom = qn[None, :] * kn
        active = denom >= eps
        D = np.maximum(denom, eps)
        logits = dot / D * scale
        logits -= logits.max(axis=0, keepdims=True)
        e = np.exp(logits)
        att = e / e.sum(axis=0, keepdims=True)                   # [T, N]
        V3 = samples[:, d:].reshape(taps, N, d)
        out = Tensor((att[:, :, None] * V3).sum(axis=0).T.reshape(d, Hq, Wq))

        def vjp(g):
            g2T = np.ascontiguousarray(g.reshape(d, N).T)
            V3 = samples[:, d:].reshape(taps, N, d)
            gatt = (V3 * g2T[None, :, :]).sum(axis=-1)
            glog = att * (gatt - (gatt * att).sum(axis=0, keepdims=True))
            glog *= scale
            gdot = glog / D
            gD = np.where(active, -glog * dot / (D * D), 0.0)
            gkscale = (gD * qn[None, :]) / np.maximum(kn, tiny)
            gaccT = np.zeros((H * W, C2))
            gQT = np.zeros((N, d))
            _kernels.attention_backward(
                samples, QT, g2T, att.reshape(-1), gdot.reshape(-1),
                gkscale.reshape(-1), i00, i01, i10, i11, w00, w01, w10, w11,
                d, gaccT, gQT,
            )
            gQ = None
            if need_q:
                gqn = (gD * kn).sum(axis=0)
                gQ = (gQT.T + (gqn / np.maximum(qn, tiny))[None, :] * Q2).reshape(q.shape)
            gkv = gaccT.T.reshape(C2, H, W) if need_kv else None
            return gQ, gkv, None

        return record("window_cosine_attention", out, (q, kv, coords), vjp)

    flat = kv.data.reshape(C2, -1)
    samples = (flat[:, i00] * w00 + flat[:, i01] * w01
               + flat[:, i10] * w10 + flat[:, i11] * w11).reshape(C2, taps, N)
    K_s = samples[:d]
    V_s = samples[d:]
    Q2 = q.data.reshape(d, N)
    dot = np.einsum("dn,dtn->tn", Q2, K_s)
    qn = np.sqrt((Q2 * Q2).sum(axis=0))
    kn = np.sqrt((K_s * K_s).sum(axis=0))
    denom = qn[None, :] * kn
    active = denom >= eps
    D = np.maximum(denom, eps)
    logits = dot / D * scale
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    att = e / e.sum(axis=0, keepdims=True)           # [T, N]
    out = Tensor(np.einsum("tn,dtn->dn", att, V_s).reshape(d, Hq, Wq))

    def vjp(g):
        g2 = g.reshape(d, N)
        K_s = samples[:d]
        V_s = samples[d:]
        gatt = np.einsum("dn,dtn->tn", g2, V_s)
        glog = att * (gatt - (gatt * att).sum(axis=0, keepdims=True))
        glog *= scale
        gdot = glog / D
        gD = np.where(active, -glog * dot / (D * D), 0.0)
        gQ = None
        if need_q:
            gqn = (gD * kn).sum(axis=0)
            gQ = (np.einsum("tn,dtn->dn", gdot, K_s)
                  + (gqn / np.maximum(qn, tiny))[None, :] * Q2).reshape(q.shape)
        gkv = gcoords = None
        if need_kv or need_coords:
            gkn = gD * qn[None, :]
            gK = gdot[None, :, :] * Q2[:, None, :] \
                + (gkn / np.maximum(kn, tiny))[None, :, :] * K_s
            gV = att[None, :, :] * g2[:, None, :]
            gsam = np.concatenate([gK, gV], axis=0).reshape(C2, taps * N)
            del gK, gV
            if need_kv:
                gacc = np.zeros((C2, H * W), dtype=g.dtype)
                for idx_k, w_k in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
                    gv = gsam * w_k
                    for c in range(C2):
                        gacc[c] += np.bincount(idx_k, weights=gv[c], minlength=H * W)
                gkv = gacc.reshape(C2, H, W)
            if need_coords:
                src = kv.data.reshape(C2, -1)
                d_dfx = (1 - fy) * (src[:, i01] - src[:, i00]) + fy * (src[:, i11] - src[:, i10])
                d_dfy = (1 - fx) * (src[:, i10] - src[:, i00]) + fx * (src[:, i11] - src[:, i01])
                gcx = (gsam * d_dfx).sum(axis=0) * inside_x
                gcy = (gsam * d_dfy).sum(axis=0) * inside_y
                gcoords = np.stack([gcx, gcy]).reshape(2, taps * Hq, Wq)
        return gQ, gkv, gcoords

    return record("window_cosine_attention", out, (q, kv, coords), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - inner),)

    return record("softmax", out, (a,), vjp)


def cosine_similarity(a, b, axis=None, eps: float = 1e-8, keepdims: bool = False) -> Tensor:
    """Cosine similarity reduced over ``axis`` (all axes when None).

    The denominator is floored at ``eps``; where the floor binds, the
    gradient treats the denominator as constant.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    axes = _norm_axis(axis, a.ndim)
    dot = (a.data * b.data).sum(axis=axes, keepdims=True)
    na2 = (a.data * a.data).sum(axis=axes, keepdims=True)
    nb2 = (b.data * b.data).sum(axis=axes, keepdims=True)
    na = np.sqrt(na2)
    nb = np.sqrt(nb2)
    denom = na * nb
    floored = denom < eps
    D = np.maximum(denom, eps)
    cos = dot / D
    out_data = cos if keepdims else np.squeeze(cos, axis=axes)
    out = Tensor(out_data)
    ensure_finite("cosine_similarity", out.data)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        active = ~floored
        tiny = np.finfo(a.dtype).tiny
        ga = g * (b.data / D - np.where(active, cos * a.data / np.maximum(na2, tiny), 0.0))
        gb = g * (a.data / D - np.where(active, cos * b.data / np.maximum(nb2, tiny), 0.0))
        return ga, gb

    return record("cosine_similarity", out, (a, b), vjp)


def resize_bilinear(x, out_hw: tuple) -> Tensor:
    """Resize a [C,H,W] map with half-pixel-aligned bilinear interpolation."""
    x = as_tensor(x)
    C, H, W = x.shape
    Ho, Wo = out_hw
    ys = (np.arange(Ho, dtype=x.dtype) + 0.5) * (H / Ho) - 0.5
    xs = (np.arange(Wo, dtype=x.dtype) + 0.5) * (W / Wo) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    coords = Tensor(np.stack([gx, gy]), requires_grad=False)
    return bilinear_sample(x, coords, mode="border")


def base_grid(H: int, W: int, dtype=np.float64) -> np.ndarray:
    """Identity sampling grid [2,H,W]: grid[0] = x column index, grid[1] = y row."""
    gx, gy = np.meshgrid(np.arange(W, dtype=dtype), np.arange(H, dtype=dtype))
    return np.stack([gx, gy])


def warp(img, flow, mode: str = "border") -> Tensor:
    """Backward-warp: out(p) = img(p + flow(p)) with bilinear sampling."""
    img, flow = as_tensor(img), as_tensor(flow)
    H, W = img.shape[1], img.shape[2]
    coords = add(Tensor(base_grid(H, W, img.dtype), requires_grad=False), flow)
    return bilinear_sample(img, coords, mode=mode)

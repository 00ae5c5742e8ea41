"""Differentiable primitives.

Every op computes its forward with numpy (or a kernel from
:mod:`flowlab.kernels`) and registers a closure mapping the output gradient
to one gradient per input (``None`` for inputs that need none).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from .core import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not a_t and not b_t:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return make_result(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def relu(x):
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.1):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def tanh(x):
    y = np.tanh(x.data)
    return make_result(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    y = 0.5 * (1 + np.tanh(0.5 * x.data))
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def sqrt(x):
    y = np.sqrt(x.data)
    return make_result(y, (x,), lambda g: (g * 0.5 / y,))


def square(x):
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2 * g * xd,))


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw)


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x, shape):
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), view=True)


def transpose(x, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), view=True)


def getitem(x, idx):
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[idx] = g
        return (out,)

    return make_result(x.data[idx], (x,), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    N, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    return cols, Ho, Wo


def _col2im(dcols, shape, kh, kw, stride, padding, Ho, Wo):
    N, C, H, W = shape
    dx = np.zeros((N, C, H + 2 * padding, W + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(N, C, kh, kw, Ho, Wo)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += d6[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _conv_shift_forward(x, w, p):
    """Stride-1 convolution as ``kh*kw`` GEMMs over shifted flat views.

    The input is zero padded and flattened with row pitch ``Wp``; the output
    for kernel tap ``(i, j)`` is a contiguous slice starting at ``i*Wp + j``.
    Each output row carries ``Wp - W`` junk columns that are cropped off.
    """
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    Wp = W + 2 * p
    Hp = H + 2 * p + 1  # one spare row keeps the last slice in bounds
    xp = np.zeros((N, C, Hp, Wp), dtype=x.dtype)
    xp[:, :, p : p + H, p : p + W] = x
    xf = xp.reshape(N, C, Hp * Wp)
    L = H * Wp
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    out = np.zeros((N, F, L), dtype=x.dtype)
    for n in range(N):
        o = out[n]
        for i in range(kh):
            for j in range(kw):
                off = i * Wp + j
                o += taps[i, j] @ xf[n, :, off : off + L]
    return out.reshape(N, F, H, Wp)[:, :, :, :W], xf, taps


def _conv_shift_backward(g, xf, taps, xshape, p, need_x, need_w):
    N, C, H, W = xshape
    kh, kw, F, _ = taps.shape
    Wp = W + 2 * p
    Hp = H + 2 * p + 1
    L = H * Wp
    gz = np.zeros((N, F, H, Wp), dtype=g.dtype)
    gz[:, :, :, :W] = g
    gf = gz.reshape(N, F, L)
    dxf = np.zeros((N, C, Hp * Wp), dtype=g.dtype) if need_x else None
    dtaps = np.zeros_like(taps) if need_w else None
    for n in range(N):
        for i in range(kh):
            for j in range(kw):
                off = i * Wp + j
                if need_w:
                    dtaps[i, j] += gf[n] @ xf[n, :, off : off + L].T
                if need_x:
                    dxf[n, :, off : off + L] += taps[i, j].T @ gf[n]
    dx = dxf.reshape(N, C, Hp, Wp)[:, :, p : p + H, p : p + W] if need_x else None
    dw = dtaps.transpose(2, 3, 0, 1) if need_w else None
    return dx, dw


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x [N,C,H,W]`` with ``weight [F,C,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {weight.shape}")
    F, C, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d needs odd kernel sizes, got kernel {weight.shape}")
    N, _, H, W = x.shape
    if padding < 0 or (H + 2 * padding - kh) % stride or (W + 2 * padding - kw) % stride:
        raise ValueError(
            f"conv2d: input {x.shape} with kernel {weight.shape}, stride {stride}, "
            f"padding {padding} gives a non-integral output size"
        )
    xshape = x.shape
    inputs = (x, weight) if bias is None else (x, weight, bias)
    bshape = (1, F, 1, 1)

    if stride == 1 and kh == kw and padding == kh // 2:
        out, xf, taps = _conv_shift_forward(x.data, weight.data, padding)
        if bias is not None:
            out = out + bias.data.reshape(bshape)

        def bw(g):
            dx, dw = _conv_shift_backward(g, xf, taps, xshape, padding, x.requires_grad, weight.requires_grad)
            db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
            return (dx, dw, db)

        return make_result(out, inputs, bw)

    cols, Ho, Wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(F, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data.reshape(1, F, 1)
    out = out.reshape(N, F, Ho, Wo)

    def bw(g):
        g2 = g.reshape(N, F, Ho * Wo)
        dw = None
        if weight.requires_grad:
            if N == 1:
                dw = (g2[0] @ cols[0].T).reshape(weight.shape)
            else:
                dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dx = _col2im(dcols, xshape, kh, kw, stride, padding, Ho, Wo)
        db = g2.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return (dx, dw, db)

    return make_result(out, inputs, bw)


def unfold(x, size=3, padding=1):
    """Neighbourhood extraction: ``[N,C,H,W] -> [N,C,size*size,H,W]`` (row-major offsets)."""
    N, C, H, W = x.shape
    cols, Ho, Wo = _im2col(x.data, size, size, 1, padding)
    out = cols.reshape(N, C, size * size, Ho, Wo)
    xshape = x.shape

    def bw(g):
        return (_col2im(g.reshape(N, C * size * size, Ho * Wo), xshape, size, size, 1, padding, Ho, Wo),)

    return make_result(out, (x,), bw)


def dense(x, weight, bias=None):
    """Fully connected layer on flattened trailing dims: ``[N,...] @ weight[K,M]``."""
    N = x.shape[0]
    flat = x.data.reshape(N, -1)
    if flat.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    xshape = x.shape
    wd = weight.data

    def bw(g):
        dx = (g @ wd.T).reshape(xshape)
        dw = flat.T @ g
        db = g.sum(axis=0) if bias is not None else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, inputs, bw)


def avg_pool2(x):
    """2x2 average pooling with stride 2."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (g4.astype(x.dtype, copy=False),)

    return make_result(out, (x,), bw)


def _interp_matrix(n_in, n_out, dtype):
    """Linear interpolation matrix (half-pixel centres, edge clamped)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    A = np.zeros((n_out, n_in), dtype=dtype)
    A[np.arange(n_out), i0] += 1 - w
    A[np.arange(n_out), i1] += w
    return A


def resize_bilinear(x, size):
    """Bilinear resize of ``[N,C,H,W]`` to ``size=(Ho, Wo)``; separable and linear."""
    N, C, H, W = x.shape
    Ho, Wo = size
    Ah = _interp_matrix(H, Ho, x.dtype)
    Aw = _interp_matrix(W, Wo, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)

    def bw(g):
        return (np.matmul(np.matmul(Ah.T, g), Aw),)

    return make_result(out, (x,), bw)


def upsample2(x):
    return resize_bilinear(x, (x.shape[2] * 2, x.shape[3] * 2))


# ---------------------------------------------------------------------------
# warping and cost volumes
# ---------------------------------------------------------------------------


def bilinear_sample(source, coords):
    """Sample ``source [N,C,H,W]`` at pixel ``coords [N,2,H',W']`` (x, y); zero outside."""
    if source.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != source.shape[0]:
        raise ValueError(f"bilinear_sample shape mismatch: source {source.shape} vs coords {coords.shape}")
    src = np.ascontiguousarray(source.data)
    crd = np.ascontiguousarray(coords.data)
    out = kernels.bilinear_forward(src, crd)

    def bw(g):
        ds, dc = kernels.bilinear_backward(np.ascontiguousarray(g), src, crd)
        return (ds, dc)

    return make_result(out, (source, coords), bw)


def pixel_grid(N, H, W, dtype=None):
    """Identity sampling grid ``[N,2,H,W]`` (x then y)."""
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    g = np.stack([xs, ys])[None].repeat(N, axis=0)
    return g.astype(dtype or np.float32)


def warp(source, flow):
    """Backward warp: ``out(x) = source(x + flow(x))``."""
    N, _, H, W = flow.shape
    grid = Tensor(pixel_grid(N, H, W, flow.dtype))
    return bilinear_sample(source, add(flow, grid))


def local_correlation(f1, f2, radius):
    """Correlation over a ``(2r+1)^2`` window, normalised by feature width."""
    if f1.shape != f2.shape:
        raise ValueError(f"local_correlation shape mismatch: {f1.shape} vs {f2.shape}")
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    H, W = f1.shape[2:]
    if 2 * radius + 1 > min(H, W):
        raise ValueError(f"radius {radius} too large for a {H}x{W} feature map")
    a = np.ascontiguousarray(f1.data)
    b = np.ascontiguousarray(f2.data)
    out = kernels.corr_forward(a, b, radius)

    def bw(g):
        return kernels.corr_backward(np.ascontiguousarray(g), a, b, radius)

    return make_result(out, (f1, f2), bw)


class BudgetExceeded(RuntimeError):
    """All-pairs cost volume would exceed the configured element budget."""

    def __init__(self, elements, budget):
        super().__init__(f"all-pairs cost volume needs {elements} entries, budget is {budget}")
        self.elements = elements
        self.budget = budget


DEFAULT_ALLPAIRS_BUDGET = 2**26


def allpairs_budget():
    import os

    return int(os.environ.get("FLOWLAB_ALLPAIRS_BUDGET", DEFAULT_ALLPAIRS_BUDGET))


def all_pairs_correlation(f1, f2, budget=None):
    """``out[n, i, j, k, l] = <f1[n,:,i,j], f2[n,:,k,l]> / sqrt(D)``."""
    if f1.shape != f2.shape:
        raise ValueError(f"all_pairs_correlation shape mismatch: {f1.shape} vs {f2.shape}")
    N, D, H, W = f1.shape
    budget = allpairs_budget() if budget is None else budget
    elements = (H * W) ** 2
    if elements > budget:
        raise BudgetExceeded(elements, budget)
    a = f1.data.reshape(N, D, H * W)
    b = f2.data.reshape(N, D, H * W)
    scale = 1.0 / np.sqrt(D)
    out = np.matmul(a.transpose(0, 2, 1), b) * f1.dtype.type(scale)

    def bw(g):
        g2 = g.reshape(N, H * W, H * W) * scale
        da = np.matmul(b, g2.transpose(0, 2, 1)).reshape(N, D, H, W)
        db = np.matmul(a, g2).reshape(N, D, H, W)
        return (da, db)

    return make_result(out.reshape(N, H, W, H, W), (f1, f2), bw)

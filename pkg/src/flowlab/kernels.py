"""Forward/backward kernels for bilinear sampling and local correlation.

Each kernel exists as a numba loop nest (``nb_*``) and a numpy version
(``np_*``).  The public names (``bilinear_forward`` etc.) point at whichever
backend is active; both are always importable so they can be compared.

Conventions
-----------
* ``coords[:, 0]`` is the x (column) coordinate, ``coords[:, 1]`` the y (row)
  coordinate, both in pixels.  Samples outside the image read zero.
* Local correlation channel ``k`` corresponds to displacement
  ``(dy, dx) = (k // (2r+1) - r, k % (2r+1) - r)`` and is normalised by the
  feature width ``D``.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

__all__ = [
    "BACKEND",
    "bilinear_forward",
    "bilinear_backward",
    "corr_forward",
    "corr_backward",
    "np_bilinear_forward",
    "np_bilinear_backward",
    "np_corr_forward",
    "np_corr_backward",
    "nb_bilinear_forward",
    "nb_bilinear_backward",
    "nb_corr_forward",
    "nb_corr_backward",
]


# ---------------------------------------------------------------------------
# bilinear sampling, numpy
# ---------------------------------------------------------------------------

def _corners(coords, H, W):
    x = coords[:, 0]
    y = coords[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            lin = np.where(valid, yi * W + xi, 0)
            out.append((dx, dy, lin, valid))
    return wx, wy, out


def np_bilinear_forward(src, coords):
    N, C, H, W = src.shape
    Ho, Wo = coords.shape[2:]
    wx, wy, corners = _corners(coords, H, W)
    flat = src.reshape(N, C, H * W)
    out = np.zeros((N, C, Ho * Wo), dtype=src.dtype)
    for dx, dy, lin, valid in corners:
        w = (wx if dx else 1 - wx) * (wy if dy else 1 - wy) * valid
        vals = np.take_along_axis(flat, lin.reshape(N, 1, -1).repeat(C, axis=1), axis=2)
        out += vals * w.reshape(N, 1, -1).astype(src.dtype)
    return out.reshape(N, C, Ho, Wo)


def np_bilinear_backward(grad, src, coords):
    N, C, H, W = src.shape
    Ho, Wo = coords.shape[2:]
    wx, wy, corners = _corners(coords, H, W)
    flat = src.reshape(N, C, H * W)
    g = grad.reshape(N, C, Ho * Wo)
    dsrc = np.zeros(N * C * H * W, dtype=np.float64)
    dx_acc = np.zeros((N, Ho * Wo), dtype=np.float64)
    dy_acc = np.zeros((N, Ho * Wo), dtype=np.float64)
    base = (np.arange(N)[:, None, None] * C + np.arange(C)[None, :, None]) * (H * W)
    for dx, dy, lin, valid in corners:
        lin = lin.reshape(N, 1, -1)
        v = valid.reshape(N, 1, -1)
        w = ((wx if dx else 1 - wx) * (wy if dy else 1 - wy)).reshape(N, 1, -1)
        idx = base + lin
        dsrc += np.bincount(idx.ravel(), weights=(g * w * v).ravel(), minlength=dsrc.size)
        vals = np.take_along_axis(flat, np.broadcast_to(lin, (N, C, lin.shape[2])), axis=2) * v
        gv = (g * vals).sum(axis=1)
        # d(weight)/dx and d(weight)/dy for this corner
        ddx = (1.0 if dx else -1.0) * (wy if dy else 1 - wy).reshape(N, -1)
        ddy = (1.0 if dy else -1.0) * (wx if dx else 1 - wx).reshape(N, -1)
        dx_acc += gv * ddx
        dy_acc += gv * ddy
    dcoords = np.stack([dx_acc, dy_acc], axis=1).reshape(N, 2, Ho, Wo)
    return dsrc.reshape(N, C, H, W).astype(src.dtype), dcoords.astype(coords.dtype)


# ---------------------------------------------------------------------------
# bilinear sampling, numba
# ---------------------------------------------------------------------------

@njit
def nb_bilinear_forward(src, coords):
    N, C, H, W = src.shape
    Ho, Wo = coords.shape[2], coords.shape[3]
    out = np.zeros((N, C, Ho, Wo), dtype=src.dtype)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                x = coords[n, 0, i, j]
                y = coords[n, 1, i, j]
                fx = np.floor(x)
                fy = np.floor(y)
                x0 = int(fx)
                y0 = int(fy)
                wx = x - fx
                wy = y - fy
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    ay = wy if dy == 1 else 1.0 - wy
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        w = ay * (wx if dx == 1 else 1.0 - wx)
                        for c in range(C):
                            out[n, c, i, j] += w * src[n, c, yi, xi]
    return out


@njit
def nb_bilinear_backward(grad, src, coords):
    N, C, H, W = src.shape
    Ho, Wo = coords.shape[2], coords.shape[3]
    dsrc = np.zeros((N, C, H, W), dtype=np.float64)
    dcoords = np.zeros((N, 2, Ho, Wo), dtype=np.float64)
    for n in range(N):
        for i in range(Ho):
            for j in range(Wo):
                x = coords[n, 0, i, j]
                y = coords[n, 1, i, j]
                fx = np.floor(x)
                fy = np.floor(y)
                x0 = int(fx)
                y0 = int(fy)
                wx = x - fx
                wy = y - fy
                gx = 0.0
                gy = 0.0
                for dy in range(2):
                    yi = y0 + dy
                    if yi < 0 or yi >= H:
                        continue
                    ay = wy if dy == 1 else 1.0 - wy
                    sy = 1.0 if dy == 1 else -1.0
                    for dx in range(2):
                        xi = x0 + dx
                        if xi < 0 or xi >= W:
                            continue
                        ax = wx if dx == 1 else 1.0 - wx
                        sx = 1.0 if dx == 1 else -1.0
                        w = ay * ax
                        for c in range(C):
                            g = grad[n, c, i, j]
                            dsrc[n, c, yi, xi] += w * g
                            gv = g * src[n, c, yi, xi]
                            gx += gv * sx * ay
                            gy += gv * sy * ax
                dcoords[n, 0, i, j] = gx
                dcoords[n, 1, i, j] = gy
    return dsrc.astype(src.dtype), dcoords.astype(coords.dtype)


# ---------------------------------------------------------------------------
# local correlation
# ---------------------------------------------------------------------------

def _shift_slices(d, n):
    """Slices (dst, src) so that dst[i] pairs with src[i + d] inside [0, n)."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def np_corr_forward(f1, f2, radius):
    N, D, H, W = f1.shape
    k = 2 * radius + 1
    out = np.zeros((N, k * k, H, W), dtype=f1.dtype)
    for a in range(k):
        dy = a - radius
        ys, ys2 = _shift_slices(dy, H)
        for b in range(k):
            dx = b - radius
            xs, xs2 = _shift_slices(dx, W)
            prod = f1[:, :, ys, xs] * f2[:, :, ys2, xs2]
            out[:, a * k + b, ys, xs] = prod.sum(axis=1)
    out /= D
    return out


def np_corr_backward(grad, f1, f2, radius):
    N, D, H, W = f1.shape
    k = 2 * radius + 1
    df1 = np.zeros_like(f1)
    df2 = np.zeros_like(f2)
    g = grad / D
    for a in range(k):
        dy = a - radius
        ys, ys2 = _shift_slices(dy, H)
        for b in range(k):
            dx = b - radius
            xs, xs2 = _shift_slices(dx, W)
            gk = g[:, a * k + b : a * k + b + 1, ys, xs]
            df1[:, :, ys, xs] += gk * f2[:, :, ys2, xs2]
            df2[:, :, ys2, xs2] += gk * f1[:, :, ys, xs]
    return df1, df2


@njit
def nb_corr_forward(f1, f2, radius):
    N, D, H, W = f1.shape
    k = 2 * radius + 1
    out = np.zeros((N, k * k, H, W), dtype=f1.dtype)
    acc = np.zeros((H, W), dtype=f1.dtype)
    inv = 1.0 / D
    for n in range(N):
        for a in range(k):
            dy = a - radius
            for b in range(k):
                dx = b - radius
                ch = a * k + b
                acc[:] = 0.0
                # channel loop outermost keeps the inner loop on contiguous rows
                for d in range(D):
                    for i in range(max(0, -dy), min(H, H - dy)):
                        for j in range(max(0, -dx), min(W, W - dx)):
                            acc[i, j] += f1[n, d, i, j] * f2[n, d, i + dy, j + dx]
                for i in range(max(0, -dy), min(H, H - dy)):
                    for j in range(max(0, -dx), min(W, W - dx)):
                        out[n, ch, i, j] = acc[i, j] * inv
    return out


@njit
def nb_corr_backward(grad, f1, f2, radius):
    N, D, H, W = f1.shape
    k = 2 * radius + 1
    df1 = np.zeros_like(f1)
    df2 = np.zeros_like(f2)
    inv = 1.0 / D
    for n in range(N):
        for a in range(k):
            dy = a - radius
            for b in range(k):
                dx = b - radius
                ch = a * k + b
                for d in range(D):
                    for i in range(max(0, -dy), min(H, H - dy)):
                        for j in range(max(0, -dx), min(W, W - dx)):
                            g = grad[n, ch, i, j] * inv
                            df1[n, d, i, j] += g * f2[n, d, i + dy, j + dx]
                            df2[n, d, i + dy, j + dx] += g * f1[n, d, i, j]
    return df1, df2


if HAVE_NUMBA:
    BACKEND = "numba"
    bilinear_forward = nb_bilinear_forward
    bilinear_backward = nb_bilinear_backward
    corr_forward = nb_corr_forward
    corr_backward = nb_corr_backward
else:
    BACKEND = "numpy"
    bilinear_forward = np_bilinear_forward
    bilinear_backward = np_bilinear_backward
    corr_forward = np_corr_forward
    corr_backward = np_corr_backward

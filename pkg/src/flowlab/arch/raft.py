"""RAFT-mini: all-pairs correlation pyramid, convolutional GRU refinement,
convex upsampling."""
from __future__ import annotations

import numpy as np

from ..tensor import (
    Tensor,
    all_pairs_correlation,
    alloc_tag,
    avg_pool2,
    bilinear_sample,
    concat,
    conv2d,
    relu,
    sigmoid,
    softmax,
    tanh,
    unfold,
)
from .config import FlowPrediction, ModelConfig
from .pwc import _conv_shapes


def _encoder_shapes(shapes, prefix, cfg, cout):
    c = 3
    n_down = int(np.log2(cfg.upsample))
    for i in range(n_down):
        w = 16 * 2**i
        _conv_shapes(shapes, f"{prefix}.down{i}", c, w, 3)
        c = w
    _conv_shapes(shapes, f"{prefix}.out", c, cout, 3)


def raft_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    _encoder_shapes(shapes, "fnet", cfg, cfg.raft_dim)
    _encoder_shapes(shapes, "cnet", cfg, cfg.raft_hidden + cfg.raft_context)
    n_corr = cfg.raft_corr_levels * (2 * cfg.raft_radius + 1) ** 2
    _conv_shapes(shapes, "upd.convc1", n_corr, 48, 1)
    _conv_shapes(shapes, "upd.convf1", 2, 16, 3)
    _conv_shapes(shapes, "upd.motion", 64, 30, 3)
    gru_in = cfg.raft_hidden + cfg.raft_context + 32
    for gate in ("z", "r", "q"):
        _conv_shapes(shapes, f"upd.gru_{gate}", gru_in, cfg.raft_hidden, 3)
    _conv_shapes(shapes, "upd.flow1", cfg.raft_hidden, 32, 3)
    _conv_shapes(shapes, "upd.flow2", 32, 2, 3)
    _conv_shapes(shapes, "upd.mask1", cfg.raft_hidden, 32, 3)
    _conv_shapes(shapes, "upd.mask2", 32, 9 * cfg.upsample**2, 1)
    return shapes


def _conv(params, name, x):
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], padding=w.shape[2] // 2)


def _encode(params, prefix, cfg, x):
    for i in range(int(np.log2(cfg.upsample))):
        x = avg_pool2(relu(_conv(params, f"{prefix}.down{i}", x)))
    return _conv(params, f"{prefix}.out", x)


def corr_pyramid(f1, f2, levels):
    """All-pairs volume reshaped to ``[N*h*w, 1, h, w]`` then 2x2-pooled ``levels-1`` times."""
    N, _, h, w = f1.shape
    with alloc_tag("cost_volume"):
        vol = all_pairs_correlation(f1, f2).reshape(N * h * w, 1, h, w)
        pyramid = [vol]
        for _ in range(levels - 1):
            pyramid.append(avg_pool2(pyramid[-1]))
    return pyramid


def lookup(pyramid, coords, radius):
    """Sample each pyramid level in a ``(2r+1)^2`` window around ``coords``.

    ``coords`` is a plain ``[N,2,h,w]`` array (no gradient, as in RAFT).
    Returns ``[N, levels*(2r+1)^2, h, w]``; within a level channels are
    row-major over (dy, dx).
    """
    N, _, h, w = coords.shape
    k = 2 * radius + 1
    d = np.arange(-radius, radius + 1, dtype=coords.dtype)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    out = []
    for i, vol in enumerate(pyramid):
        c = (coords + 0.5) / 2**i - 0.5
        c = c.transpose(0, 2, 3, 1).reshape(N * h * w, 2, 1, 1)
        grid = np.empty((N * h * w, 2, k, k), dtype=coords.dtype)
        grid[:, 0] = c[:, 0] + dx
        grid[:, 1] = c[:, 1] + dy
        s = bilinear_sample(vol, Tensor(grid))
        out.append(s.reshape(N, h, w, k * k).transpose(0, 3, 1, 2))
    return concat(out, axis=1)


def convex_upsample(flow, mask, factor):
    """Each fine pixel is a softmax-weighted combination of the 3x3 coarse neighbours."""
    N, _, h, w = flow.shape
    m = softmax(mask.reshape(N, 1, 9, factor, factor, h, w), axis=2)
    nb = unfold(flow * float(factor), 3, 1).reshape(N, 2, 9, 1, 1, h, w)
    up = (m * nb).sum(axis=2)  # [N,2,f,f,h,w]
    return up.transpose(0, 1, 4, 2, 5, 3).reshape(N, 2, h * factor, w * factor), m


def forward_raft(state, frame1, frame2, return_masks=False) -> FlowPrediction:
    cfg = state.config
    params = state.params
    N, _, H, W = frame1.shape
    cfg.check_input(H, W)
    x = concat([frame1, frame2], axis=0) * 2.0 - 1.0
    fmap = _encode(params, "fnet", cfg, x)
    f1, f2 = fmap[:N], fmap[N:]
    h, w = f1.shape[2:]
    pyramid = corr_pyramid(f1, f2, cfg.raft_corr_levels)

    ctx = _encode(params, "cnet", cfg, x[:N])
    hidden = tanh(ctx[:, : cfg.raft_hidden])
    context = relu(ctx[:, cfg.raft_hidden :])

    grid = np.stack(np.meshgrid(np.arange(w), np.arange(h), indexing="xy"))[None]
    grid = np.repeat(grid, N, axis=0).astype(f1.dtype)
    flow = Tensor(np.zeros((N, 2, h, w), dtype=f1.dtype))
    intermediates = []
    masks = []
    for _ in range(cfg.raft_iters):
        flow = flow.detach()
        corr = lookup(pyramid, grid + flow.data, cfg.raft_radius)
        cor = relu(_conv(params, "upd.convc1", corr))
        flo = relu(_conv(params, "upd.convf1", flow))
        motion = relu(_conv(params, "upd.motion", concat([cor, flo], axis=1)))
        motion = concat([motion, flow], axis=1)
        inp = concat([context, motion], axis=1)
        hx = concat([hidden, inp], axis=1)
        z = sigmoid(_conv(params, "upd.gru_z", hx))
        r = sigmoid(_conv(params, "upd.gru_r", hx))
        q = tanh(_conv(params, "upd.gru_q", concat([r * hidden, inp], axis=1)))
        hidden = hidden + z * (q - hidden)
        delta = _conv(params, "upd.flow2", relu(_conv(params, "upd.flow1", hidden)))
        mask = _conv(params, "upd.mask2", relu(_conv(params, "upd.mask1", hidden))) * 0.25
        flow = flow + delta
        up, m = convex_upsample(flow, mask, cfg.upsample)
        intermediates.append((up, 1))
        masks.append(m)
    pred = FlowPrediction(final=intermediates[-1][0], intermediates=intermediates)
    if return_masks:
        return pred, masks
    return pred

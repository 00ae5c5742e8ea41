"""PWC-mini and IRR-mini: feature pyramid, warping, local cost volume, flow decoder.

Both models share the pyramid encoder.  PWC-mini owns one decoder per level;
IRR-mini owns a single decoder reused at every level, fed through per-level
1x1 adapters so that its input width is level independent.
"""
from __future__ import annotations

import numpy as np

from ..tensor import (
    Tensor,
    alloc_tag,
    avg_pool2,
    concat,
    conv2d,
    leaky_relu,
    local_correlation,
    resize_bilinear,
    upsample2,
    warp,
)
from ..tensor.core import make_result
from .config import FlowPrediction, ModelConfig


def _conv_shapes(shapes, name, cin, cout, k):
    shapes[f"{name}.w"] = (cout, cin, k, k)
    shapes[f"{name}.b"] = (cout,)


def _decoder_shapes(shapes, prefix, cin, widths):
    c = cin
    for i, w in enumerate(widths):
        _conv_shapes(shapes, f"{prefix}.conv{i}", c, w, 3)
        c = w
    _conv_shapes(shapes, f"{prefix}.flow", c, 2, 3)


def encoder_shapes(cfg: ModelConfig, shapes):
    c = 3
    for lvl, w in enumerate(cfg.widths, start=1):
        _conv_shapes(shapes, f"fpn.l{lvl}.a", c, w, 3)
        _conv_shapes(shapes, f"fpn.l{lvl}.b", w, w, 3)
        c = w
    return shapes


def corr_channels(cfg: ModelConfig) -> int:
    return (2 * cfg.search_radius + 1) ** 2


def pwc_shapes(cfg: ModelConfig) -> dict:
    shapes = encoder_shapes(cfg, {})
    k = corr_channels(cfg)
    for lvl, w in enumerate(cfg.widths, start=1):
        _decoder_shapes(shapes, f"dec.l{lvl}", k + w + 2, cfg.decoder_widths)
    return shapes


def irr_shapes(cfg: ModelConfig) -> dict:
    shapes = encoder_shapes(cfg, {})
    for lvl, w in enumerate(cfg.widths, start=1):
        _conv_shapes(shapes, f"adapt.l{lvl}", w, cfg.irr_width, 1)
    _decoder_shapes(shapes, "dec", corr_channels(cfg) + cfg.irr_width + 2, cfg.decoder_widths)
    return shapes


def conv(params, name, x, stride=1, act=True):
    w = params[f"{name}.w"]
    pad = w.shape[2] // 2
    y = conv2d(x, w, params[f"{name}.b"], stride=stride, padding=pad)
    return leaky_relu(y, 0.1) if act else y


def encode(params, cfg, x):
    """Feature pyramid, finest (1/2 resolution) first."""
    feats = []
    for lvl in range(1, cfg.levels + 1):
        x = avg_pool2(conv(params, f"fpn.l{lvl}.a", x))
        x = conv(params, f"fpn.l{lvl}.b", x)
        feats.append(x)
    return feats


def _pad_to(t, Hp, Wp):
    """Zero pad ``[N,C,H,W]`` on the bottom/right to ``Hp x Wp``."""
    N, C, H, W = t.shape
    data = np.zeros((N, C, Hp, Wp), dtype=t.dtype)
    data[:, :, :H, :W] = t.data
    return make_result(data, (t,), lambda g: (g[:, :, :H, :W],))


def correlate(f1, f2, radius):
    """Local correlation that tolerates maps smaller than the search window.

    Small maps are zero padded on the bottom/right to fit the window, which
    yields exactly the zero-outside-image values, then cropped back.
    """
    H, W = f1.shape[2:]
    size = 2 * radius + 1
    if size <= min(H, W):
        with alloc_tag("cost_volume"):
            return local_correlation(f1, f2, radius)
    Hp, Wp = max(H, size), max(W, size)
    with alloc_tag("cost_volume"):
        out = local_correlation(_pad_to(f1, Hp, Wp), _pad_to(f2, Hp, Wp), radius)
    return out[:, :, :H, :W]


def _decode(params, prefix, cfg, x):
    for i in range(len(cfg.decoder_widths)):
        x = conv(params, f"{prefix}.conv{i}", x)
    return conv(params, f"{prefix}.flow", x, act=False)


def _pyramid_forward(state, frame1, frame2, shared):
    cfg = state.config
    params = state.params
    N, _, H, W = frame1.shape
    cfg.check_input(H, W)
    x = concat([frame1, frame2], axis=0) * 2.0 - 1.0
    feats = encode(params, cfg, x)
    intermediates = []
    flow = None
    for lvl in range(cfg.levels, 0, -1):
        f = feats[lvl - 1]
        f1, f2 = f[:N], f[N:]
        h, w = f1.shape[2:]
        if flow is None:
            up = Tensor(np.zeros((N, 2, h, w), dtype=f1.dtype))
            f2w = f2
        else:
            up = upsample2(flow) * 2.0
            f2w = warp(f2, up)
        corr = leaky_relu(correlate(f1, f2w, cfg.search_radius), 0.1)
        if shared:
            feat_in = conv(params, f"adapt.l{lvl}", f1)
            prefix = "dec"
        else:
            feat_in = f1
            prefix = f"dec.l{lvl}"
        res = _decode(params, prefix, cfg, concat([corr, feat_in, up], axis=1))
        flow = up + res
        intermediates.append((flow, 2**lvl))
    final = resize_bilinear(flow, (H, W)) * 2.0
    return FlowPrediction(final=final, intermediates=intermediates)


def forward_pwc(state, frame1, frame2) -> FlowPrediction:
    """Coarse-to-fine flow with a separate decoder per pyramid level."""
    return _pyramid_forward(state, frame1, frame2, shared=False)


def forward_irr(state, frame1, frame2) -> FlowPrediction:
    """Coarse-to-fine flow with one decoder shared by every level."""
    return _pyramid_forward(state, frame1, frame2, shared=True)

"""Endpoint-error training losses."""
from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from ..tensor.core import make_result


def endpoint_error(diff: Tensor) -> Tensor:
    """Per-pixel ``|d|`` of a ``[N,2,H,W]`` difference; gradient 0 where ``d = 0``."""
    d = diff.data
    n = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2)

    def bw(g):
        safe = np.where(n > 0, n, 1)
        return ((g / safe * (n > 0))[:, None] * d,)

    return make_result(n, (diff,), bw)


def _robust(epe, q):
    """``(epe + 0.01)^q``; plain EPE when ``q == 1``."""
    if q == 1.0:
        return epe
    x = epe.data + 0.01
    return make_result(x**q, (epe,), lambda g: (g * q * x ** (q - 1),))


def downsample_flow(gt, scale: int):
    """Block-average ``[N,2,H,W]`` flow by ``scale`` and rescale its magnitude."""
    if scale == 1:
        return gt
    N, C, H, W = gt.shape
    if H % scale or W % scale:
        raise ValueError(f"flow {H}x{W} not divisible by scale {scale}")
    return gt.reshape(N, C, H // scale, scale, W // scale, scale).mean(axis=(3, 5)) / scale


def _level_loss(flow, gt, valid, q):
    epe = _robust(endpoint_error(flow - Tensor(gt.astype(flow.dtype))), q)
    if valid is None:
        return epe.mean()
    m = valid.astype(flow.dtype)
    return (epe * Tensor(m)).sum() * (1.0 / max(float(m.sum()), 1.0))


def loss_multiscale(prediction, gt, weights, valid=None, q=1.0):
    """Weighted sum over pyramid levels of the mean endpoint error.

    Ground truth is block-averaged to each level's native resolution and
    divided by the level scale.
    """
    levels = prediction.intermediates
    if len(weights) != len(levels):
        raise ValueError(f"{len(weights)} weights for {len(levels)} prediction levels")
    gt = np.asarray(gt)
    total = None
    for w, (flow, scale) in zip(weights, levels):
        if not w:
            continue
        g = downsample_flow(gt, scale)
        vm = None
        if valid is not None:
            N, H, W = valid.shape
            # a coarse pixel counts only if its whole block is valid
            vm = valid.reshape(N, H // scale, scale, W // scale, scale).all(axis=(2, 4))
        term = _level_loss(flow, g, vm, q) * float(w)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all level weights are zero")
    return total


def loss_sequence(prediction, gt, gamma=0.8, valid=None, q=1.0):
    """``sum_i gamma^(T-i) * EPE(flow_i)`` over the T refinement outputs."""
    flows = prediction.flows()
    if not flows:
        raise ValueError("prediction has no intermediate flows")
    if not 0 < gamma <= 1:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    T = len(flows)
    gt = np.asarray(gt)
    total = None
    for i, flow in enumerate(flows, start=1):
        term = _level_loss(flow, gt, valid, q) * float(gamma ** (T - i))
        total = term if total is None else total + term
    return total


def default_level_weights(n):
    """Finest level weight 1, halving towards the coarsest."""
    return tuple(0.5 ** (n - 1 - i) for i in range(n))

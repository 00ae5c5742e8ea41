"""Training augmentations that keep frames and flow labels consistent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import FlowSample

ERASE_AREA = (0.02, 0.25)
ERASE_ASPECT = (0.3, 3.3)


@dataclass(frozen=True)
class AugmentPolicy:
    vflip_prob: float = 0.0
    erase_prob: float = 0.0
    crop: tuple | None = None       # (h, w)
    brightness: float = 0.0         # additive jitter range, per frame
    contrast: float = 0.0           # multiplicative jitter range, per frame

    def __post_init__(self):
        for name in ("vflip_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.brightness < 0 or self.contrast < 0:
            raise ValueError("jitter ranges must be non-negative")

    @property
    def identity(self) -> bool:
        return self == AugmentPolicy()

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if d.get("crop") is not None:
            d["crop"] = tuple(d["crop"])
        return cls(**d)


def vflip(sample: FlowSample) -> FlowSample:
    """Flip rows of both frames and the flow; the vertical component changes sign."""
    out = sample.copy()
    out.frame1 = sample.frame1[:, ::-1].copy()
    out.frame2 = sample.frame2[:, ::-1].copy()
    flow = sample.flow[:, ::-1].copy()
    flow[1] = -flow[1]
    out.flow = flow
    out.valid = sample.valid[::-1].copy()
    out.layers1 = out.layers2 = None
    return out


def crop(sample: FlowSample, size, rng) -> FlowSample:
    h, w = size
    H, W = sample.size
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"crop {h}x{w} does not fit a {H}x{W} frame")
    y = int(rng.integers(0, H - h + 1))
    x = int(rng.integers(0, W - w + 1))
    out = sample.copy()
    sl = (slice(y, y + h), slice(x, x + w))
    out.frame1 = sample.frame1[:, sl[0], sl[1]].copy()
    out.frame2 = sample.frame2[:, sl[0], sl[1]].copy()
    out.flow = sample.flow[:, sl[0], sl[1]].copy()
    out.valid = sample.valid[sl].copy()
    out.layers1 = out.layers2 = None
    return out


def erase(sample: FlowSample, rng) -> FlowSample:
    """Fill a random rectangle of frame 2 with frame 2's mean colour."""
    H, W = sample.size
    out = sample.copy()
    for _ in range(100):
        area = rng.uniform(*ERASE_AREA) * H * W
        aspect = np.exp(rng.uniform(*np.log(ERASE_ASPECT)))
        h = int(round(np.sqrt(area * aspect)))
        w = int(round(np.sqrt(area / aspect)))
        if 1 <= h <= H and 1 <= w <= W:
            break
    else:
        return out
    y = int(rng.integers(0, H - h + 1))
    x = int(rng.integers(0, W - w + 1))
    mean = sample.frame2.reshape(3, -1).mean(axis=1)
    out.frame2[:, y : y + h, x : x + w] = mean[:, None, None]
    return out


def _jitter(img, rng, brightness, contrast):
    b = rng.uniform(-brightness, brightness) if brightness else 0.0
    c = 1.0 + (rng.uniform(-contrast, contrast) if contrast else 0.0)
    return np.clip((img - 0.5) * c + 0.5 + b, 0.0, 1.0).astype(img.dtype)


def augment(sample: FlowSample, policy: AugmentPolicy, rng) -> FlowSample:
    """Apply crop, vertical flip, photometric jitter and erasing, in that order.

    Every random decision is drawn from ``rng`` in a fixed order, so the
    result is a pure function of the generator state.
    """
    flip = rng.random() < policy.vflip_prob
    do_erase = rng.random() < policy.erase_prob
    out = sample
    if policy.crop is not None:
        out = crop(out, policy.crop, rng)
    if flip:
        out = vflip(out)
    if policy.brightness or policy.contrast:
        out = out.copy() if out is sample else out
        out.frame1 = _jitter(out.frame1, rng, policy.brightness, policy.contrast)
        out.frame2 = _jitter(out.frame2, rng, policy.brightness, policy.contrast)
    if do_erase:
        out = erase(out, rng)
    if out is sample:
        out = sample.copy()
    out.meta = dict(out.meta, vflip=bool(flip), erased=bool(do_erase))
    return out

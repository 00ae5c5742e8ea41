"""Layered synthetic scenes with exact ground-truth flow.

A scene is a stack of layers.  Layer 0 is an infinite background plane; the
others are ellipses or convex polygons.  Each layer carries a smooth analytic
texture defined in frame-1 coordinates and a similarity motion (translation,
rotation and scale about the layer centre) taking frame 1 to frame 2.

Frame 1 shows every layer at rest; frame 2 shows every layer moved.  The flow
at a frame-1 pixel is the displacement of the top-most layer covering it, so
it is exact by construction.  Edges are hard (no anti-aliasing).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..seeding import stream

SHAPES = ("ellipse", "polygon")


@dataclass(frozen=True)
class SceneSpec:
    """Fixed rendering policy: everything here is a constant, nothing is learned."""

    num_layers: tuple = (2, 4)          # inclusive range, background counts as a layer
    shapes: tuple = SHAPES
    translation: tuple = (0.0, 8.0)     # translation magnitude range (px), uniform
    max_rotation: float = 0.03          # radians
    max_scale: float = 0.03             # relative scale change
    max_flow: float | None = None       # hard bound on |flow|; default translation[1] + 2
    layer_size: tuple = (0.15, 0.4)     # layer radius as a fraction of min(H, W)
    texture_freq: float = 0.06          # highest texture frequency (cycles / px)
    texture_waves: int = 4
    brightness: float = 0.0             # frame-2 additive jitter range
    contrast: float = 0.0               # frame-2 multiplicative jitter range
    motion_blur: bool = False

    def __post_init__(self):
        lo, hi = self.num_layers
        if not 1 <= lo <= hi <= 4:
            raise ValueError(f"num_layers must lie in [1, 4], got {self.num_layers}")
        if not 0 <= self.translation[0] <= self.translation[1]:
            raise ValueError(f"bad translation range {self.translation}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(unknown)}")

    @property
    def flow_bound(self) -> float:
        return self.max_flow if self.max_flow is not None else self.translation[1] + 2.0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Motion:
    tx: float = 0.0
    ty: float = 0.0
    rotation: float = 0.0
    scale: float = 0.0  # relative: 0.0 means unchanged size

    def matrix(self):
        s = 1.0 + self.scale
        c, n = np.cos(self.rotation), np.sin(self.rotation)
        return s * np.array([[c, -n], [n, c]])


@dataclass
class Layer:
    shape: str                 # "plane", "ellipse" or "polygon"
    center: tuple
    geometry: dict
    texture: dict
    motion: Motion = field(default_factory=Motion)

    def contains(self, x, y):
        """Membership of frame-1 points (arrays) in the layer's rest pose."""
        if self.shape == "plane":
            return np.ones(np.shape(x), bool)
        cx, cy = self.center
        dx, dy = x - cx, y - cy
        if self.shape == "ellipse":
            a, b, th = self.geometry["a"], self.geometry["b"], self.geometry["angle"]
            c, s = np.cos(th), np.sin(th)
            u = (c * dx + s * dy) / a
            v = (-s * dx + c * dy) / b
            return u * u + v * v <= 1.0
        verts = np.asarray(self.geometry["vertices"])  # CCW, relative to centre
        inside = np.ones(np.shape(x), bool)
        for i in range(len(verts)):
            p, q = verts[i], verts[(i + 1) % len(verts)]
            cross = (q[0] - p[0]) * (dy - p[1]) - (q[1] - p[1]) * (dx - p[0])
            inside &= cross >= 0
        return inside

    def forward(self, x, y, t=1.0):
        """Frame-1 point -> its position at time ``t`` (t = 1 is frame 2)."""
        m = self.motion
        part = Motion(m.tx * t, m.ty * t, m.rotation * t, m.scale * t)
        A = part.matrix()
        cx, cy = self.center
        dx, dy = x - cx, y - cy
        return cx + A[0, 0] * dx + A[0, 1] * dy + part.tx, cy + A[1, 0] * dx + A[1, 1] * dy + part.ty

    def inverse(self, x, y, t=1.0):
        m = self.motion
        part = Motion(m.tx * t, m.ty * t, m.rotation * t, m.scale * t)
        Ai = np.linalg.inv(part.matrix())
        cx, cy = self.center
        dx, dy = x - cx - part.tx, y - cy - part.ty
        return cx + Ai[0, 0] * dx + Ai[0, 1] * dy, cy + Ai[1, 0] * dx + Ai[1, 1] * dy

    def color(self, x, y):
        """Analytic RGB texture at frame-1 coordinates, ``[3, ...]`` in [0, 1]."""
        tex = self.texture
        out = np.asarray(tex["base"], float).reshape(3, *([1] * np.ndim(x))) + 0.0 * x
        for fx, fy, phase, amp in tex["waves"]:
            wave = np.sin(2 * np.pi * (fx * x + fy * y) + phase)
            out = out + np.asarray(amp).reshape(3, *([1] * np.ndim(x))) * wave
        return np.clip(out, 0.0, 1.0)


@dataclass
class Scene:
    layers: list
    brightness: float = 0.0
    contrast: float = 1.0
    motion_blur: bool = False


@dataclass
class FlowSample:
    frame1: np.ndarray          # [3,H,W] float32 in [0, 1]
    frame2: np.ndarray
    flow: np.ndarray            # [2,H,W] float32 (u, v)
    valid: np.ndarray           # [H,W] bool
    layers1: np.ndarray | None = None   # top layer index per frame-1 pixel
    layers2: np.ndarray | None = None   # top layer index per frame-2 pixel
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.flow.shape[1:]

    def copy(self):
        return dataclasses.replace(
            self,
            frame1=self.frame1.copy(),
            frame2=self.frame2.copy(),
            flow=self.flow.copy(),
            valid=self.valid.copy(),
            meta=dict(self.meta),
        )


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _texture(rng, spec):
    base = rng.uniform(0.25, 0.75, size=3)
    waves = []
    for _ in range(spec.texture_waves):
        f = rng.uniform(0.3, 1.0) * spec.texture_freq
        th = rng.uniform(0, 2 * np.pi)
        waves.append((f * np.cos(th), f * np.sin(th), rng.uniform(0, 2 * np.pi), list(rng.uniform(0.03, 0.12, size=3))))
    return {"base": list(base), "waves": waves}


def _motion(rng, spec):
    mag = rng.uniform(*spec.translation)
    ang = rng.uniform(0, 2 * np.pi)
    return Motion(
        tx=mag * np.cos(ang),
        ty=mag * np.sin(ang),
        rotation=rng.uniform(-spec.max_rotation, spec.max_rotation),
        scale=rng.uniform(-spec.max_scale, spec.max_scale),
    )


def _shape(rng, spec, kind, H, W):
    r = rng.uniform(*spec.layer_size) * min(H, W)
    center = (rng.uniform(0, W - 1), rng.uniform(0, H - 1))
    if kind == "ellipse":
        geom = {"a": r, "b": r * rng.uniform(0.5, 1.0), "angle": rng.uniform(0, np.pi)}
    else:
        n = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        geom = {"vertices": [[r * np.cos(a), r * np.sin(a)] for a in angles]}
    return center, geom


def _max_displacement(layer, H, W):
    """Largest |flow| the layer can produce over the visible frame."""
    xs = np.array([0, W - 1, 0, W - 1, layer.center[0]])
    ys = np.array([0, 0, H - 1, H - 1, layer.center[1]])
    fx, fy = layer.forward(xs, ys)
    return float(np.max(np.hypot(fx - xs, fy - ys)))


def sample_scene(spec: SceneSpec, size, seed: int, max_tries=100) -> Scene:
    H, W = size
    rng = stream(seed, "data")
    n = int(rng.integers(spec.num_layers[0], spec.num_layers[1] + 1))
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    layers = []
    for i in range(n):
        for _ in range(max_tries):
            if i == 0:
                center, geom, kind = ((W - 1) / 2, (H - 1) / 2), {}, "plane"
            else:
                kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
                center, geom = _shape(rng, spec, kind, H, W)
            layer = Layer(kind, center, geom, _texture(rng, spec), _motion(rng, spec))
            if _max_displacement(layer, H, W) > spec.flow_bound:
                continue  # motion out of bounds: regenerate
            if not layer.contains(xs, ys).any():
                continue  # zero visible area: regenerate
            layers.append(layer)
            break
        else:
            raise RuntimeError(f"could not generate layer {i} within bounds after {max_tries} tries")
    b = rng.uniform(-spec.brightness, spec.brightness) if spec.brightness else 0.0
    c = 1.0 + (rng.uniform(-spec.contrast, spec.contrast) if spec.contrast else 0.0)
    return Scene(layers, brightness=b, contrast=c, motion_blur=spec.motion_blur)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _render(layers, xs, ys, t):
    """Top-layer index and colour of each pixel at time ``t`` (0 = frame 1)."""
    H, W = xs.shape
    top = np.full((H, W), -1, np.int8)
    img = np.zeros((3, H, W))
    for idx in range(len(layers) - 1, -1, -1):
        layer = layers[idx]
        free = top < 0
        if not free.any():
            break
        px, py = (xs[free], ys[free]) if t == 0 else layer.inverse(xs[free], ys[free], t)
        hit = layer.contains(px, py)
        sel = np.flatnonzero(free.ravel())[hit]
        top.ravel()[sel] = idx
        col = layer.color(px[hit], py[hit])
        img.reshape(3, -1)[:, sel] = col
    return top, img


def render_scene(scene: Scene, size, blur_steps=5) -> FlowSample:
    H, W = size
    ys, xs = np.mgrid[0:H, 0:W].astype(float)
    top1, img1 = _render(scene.layers, xs, ys, 0.0)
    top2, img2 = _render(scene.layers, xs, ys, 1.0)
    if scene.motion_blur:
        acc = np.zeros_like(img2)
        for t in np.linspace(0.5, 1.0, blur_steps):
            acc += _render(scene.layers, xs, ys, t)[1]
        img2 = acc / blur_steps
    if scene.brightness or scene.contrast != 1.0:
        img2 = np.clip((img2 - 0.5) * scene.contrast + 0.5 + scene.brightness, 0.0, 1.0)
    flow = np.zeros((2, H, W))
    for idx, layer in enumerate(scene.layers):
        m = top1 == idx
        if m.any():
            fx, fy = layer.forward(xs[m], ys[m])
            flow[0][m] = fx - xs[m]
            flow[1][m] = fy - ys[m]
    return FlowSample(
        frame1=img1.astype(np.float32),
        frame2=img2.astype(np.float32),
        flow=flow.astype(np.float32),
        valid=np.ones((H, W), bool),
        layers1=top1,
        layers2=top2,
    )


def generate_sample(spec: SceneSpec, size, seed: int) -> FlowSample:
    """Deterministic sample for ``(spec, size, seed)``."""
    sample = render_scene(sample_scene(spec, size, seed), size)
    sample.meta = {"seed": int(seed), "spec": spec.fingerprint(), "size": [int(size[0]), int(size[1])]}
    return sample


def consistent_mask(sample: FlowSample) -> np.ndarray:
    """Frame-1 pixels whose layer is also the top layer at all four bilinear
    neighbours of ``x + flow(x)`` in frame 2 (i.e. not occluded, not near an
    occluding edge)."""
    H, W = sample.size
    ys, xs = np.mgrid[0:H, 0:W]
    tx = xs + sample.flow[0].astype(np.float64)
    ty = ys + sample.flow[1].astype(np.float64)
    x0 = np.floor(tx).astype(int)
    y0 = np.floor(ty).astype(int)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < W) & (y0 + 1 < H)
    x0c = np.clip(x0, 0, W - 2)
    y0c = np.clip(y0, 0, H - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= sample.layers2[y0c + dy, x0c + dx] == sample.layers1
    return ok

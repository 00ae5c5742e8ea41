"""Flow fields, their file formats and colour visualisation.

Formats
-------
``.flo`` (Middlebury)
    ``b"PIEH"`` (float 202021.25 little-endian), int32 width, int32 height,
    then ``height*width`` interleaved ``(u, v)`` float32 pairs, row-major,
    all little-endian.
KITTI flow PNG
    16-bit RGB PNG; R = u*64 + 2**15, G = v*64 + 2**15, B = validity (0/1).
Renders
    8-bit RGB PNG or binary PPM.

The PNG codec is a deliberately small one: it writes non-interlaced 8/16-bit
RGB with filter type 0 and reads any non-interlaced 8/16-bit greyscale/RGB/RGBA
file with the five standard scanline filters.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from ._accel import njit

FLO_MAGIC = b"PIEH"
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class FlowFormatError(ValueError):
    """Malformed flow file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u)
        self.v = np.asarray(self.v)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u and v must be matching 2-D arrays, got {self.u.shape} and {self.v.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid).astype(bool)
            if self.valid.shape != self.u.shape:
                raise ValueError(f"valid mask shape {self.valid.shape} != flow shape {self.u.shape}")

    @property
    def shape(self):
        return self.u.shape

    @property
    def mask(self) -> np.ndarray:
        return np.ones(self.u.shape, bool) if self.valid is None else self.valid

    @classmethod
    def from_array(cls, arr, valid=None):
        """From ``[2,H,W]`` (channel-first) arrays."""
        arr = np.asarray(arr)
        return cls(arr[0], arr[1], valid)

    def to_array(self) -> np.ndarray:
        return np.stack([self.u, self.v])

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


# ---------------------------------------------------------------------------
# .flo
# ---------------------------------------------------------------------------

def write_flo(flow: FlowField) -> bytes:
    u = np.asarray(flow.u, dtype="<f4")
    v = np.asarray(flow.v, dtype="<f4")
    m = flow.mask
    if not (np.isfinite(u[m]).all() and np.isfinite(v[m]).all()):
        raise ValueError("flow must be finite where valid")
    h, w = u.shape
    body = np.stack([u, v], axis=-1).astype("<f4").tobytes()
    return FLO_MAGIC + struct.pack("<ii", w, h) + body


def read_flo(data: bytes) -> FlowField:
    if len(data) < 4 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"bad .flo magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise FlowFormatError("truncated .flo header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"invalid .flo size {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FlowFormatError(f"truncated .flo payload: need {need} bytes, have {len(data)}", len(data))
    arr = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(arr[..., 0].astype(np.float32), arr[..., 1].astype(np.float32))


def save_flo(path, flow):
    with open(path, "wb") as f:
        f.write(write_flo(flow))


def load_flo(path) -> FlowField:
    with open(path, "rb") as f:
        return read_flo(f.read())


# ---------------------------------------------------------------------------
# minimal PNG codec
# ---------------------------------------------------------------------------

def _chunk(kind: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", zlib.crc32(kind + payload))


def encode_png(img: np.ndarray) -> bytes:
    """Encode ``[H,W,3]`` uint8 or uint16 RGB."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype not in (np.uint8, np.uint16):
        raise ValueError(f"encode_png wants HxWx3 uint8/uint16, got {img.shape} {img.dtype}")
    h, w, _ = img.shape
    depth = 8 * img.dtype.itemsize
    rows = img.astype(">u2" if depth == 16 else np.uint8).reshape(h, -1).view(np.uint8).reshape(h, -1)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, depth, 2, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b"")


@njit
def _unfilter_rows(buf, h, stride, bpp):
    """Undo PNG scanline filters; returns (rows, -1) or (rows, bad row index)."""
    out = np.zeros((h, stride), np.uint8)
    prev = np.zeros(stride, np.int32)
    cur = np.zeros(stride, np.int32)
    pos = 0
    for y in range(h):
        ftype = buf[pos]
        if ftype > 4:
            return out, y
        for x in range(stride):
            raw = np.int32(buf[pos + 1 + x])
            a = cur[x - bpp] if x >= bpp else 0
            b = prev[x]
            c = prev[x - bpp] if x >= bpp else 0
            if ftype == 0:
                pred = 0
            elif ftype == 1:
                pred = a
            elif ftype == 2:
                pred = b
            elif ftype == 3:
                pred = (a + b) >> 1
            else:
                p = a + b - c
                pa = abs(p - a)
                pb = abs(p - b)
                pc = abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
            cur[x] = (raw + pred) & 0xFF
        for x in range(stride):
            out[y, x] = cur[x]
            prev[x] = cur[x]
        pos += 1 + stride
    return out, -1


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    rows, bad = _unfilter_rows(np.frombuffer(raw, np.uint8), h, stride, bpp)
    if bad >= 0:
        raise FlowFormatError(f"unknown PNG filter type in row {bad}", bad * (1 + stride))
    return rows


def decode_png(data: bytes) -> np.ndarray:
    """Decode to ``[H,W,C]`` uint8/uint16 (C = 1, 3 or 4)."""
    if data[:8] != PNG_SIGNATURE:
        raise FlowFormatError("bad PNG signature", 0)
    pos = 8
    idat = []
    hdr = None
    while pos < len(data):
        if pos + 8 > len(data):
            raise FlowFormatError("truncated PNG chunk header", pos)
        (length,) = struct.unpack_from(">I", data, pos)
        kind = data[pos + 4 : pos + 8]
        payload = data[pos + 8 : pos + 8 + length]
        if len(payload) < length or pos + 12 + length > len(data):
            raise FlowFormatError(f"truncated PNG chunk {kind!r}", pos)
        (crc,) = struct.unpack_from(">I", data, pos + 8 + length)
        if crc != zlib.crc32(kind + payload):
            raise FlowFormatError(f"CRC mismatch in chunk {kind!r}", pos)
        if kind == b"IHDR":
            hdr = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            break
        pos += 12 + length
    if hdr is None:
        raise FlowFormatError("missing IHDR", 8)
    w, h, depth, ctype, _, _, interlace = hdr
    channels = {0: 1, 2: 3, 6: 4}.get(ctype)
    if channels is None or depth not in (8, 16) or interlace:
        raise FlowFormatError(f"unsupported PNG (colour type {ctype}, depth {depth}, interlace {interlace})", 16)
    bpp = channels * depth // 8
    raw = zlib.decompress(b"".join(idat))
    if len(raw) < h * (1 + w * bpp):
        raise FlowFormatError("truncated PNG image data", pos)
    rows = _unfilter(raw, h, w * bpp, bpp)
    if depth == 16:
        return rows.view(">u2").astype(np.uint16).reshape(h, w, channels)
    return rows.reshape(h, w, channels)


# ---------------------------------------------------------------------------
# KITTI flow PNG
# ---------------------------------------------------------------------------

def kitti_encode(flow: FlowField) -> np.ndarray:
    """``[H,W,3]`` uint16 array in R=u, G=v, B=valid order."""
    m = flow.mask
    u = np.where(m, flow.u, 0.0)
    v = np.where(m, flow.v, 0.0)
    if np.any(np.abs(u) >= 512) or np.any(np.abs(v) >= 512):
        raise ValueError("KITTI PNG can only store |u|, |v| < 512")
    out = np.empty(u.shape + (3,), np.uint16)
    out[..., 0] = np.round(u.astype(np.float64) * 64 + 2**15)
    out[..., 1] = np.round(v.astype(np.float64) * 64 + 2**15)
    out[..., 2] = m
    return out


def kitti_decode(img: np.ndarray) -> FlowField:
    img = np.asarray(img)
    u = (img[..., 0].astype(np.float64) - 2**15) / 64.0
    v = (img[..., 1].astype(np.float64) - 2**15) / 64.0
    return FlowField(u, v, img[..., 2] > 0)


def write_kitti_png(flow: FlowField) -> bytes:
    return encode_png(kitti_encode(flow))


def read_kitti_png(data: bytes) -> FlowField:
    img = decode_png(data)
    if img.dtype != np.uint16 or img.shape[2] < 3:
        raise FlowFormatError("KITTI flow PNG must be 16-bit RGB", 16)
    return kitti_decode(img)


# ---------------------------------------------------------------------------
# colour wheel
# ---------------------------------------------------------------------------

def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel (RY, YG, GC, CB, BM, MR)."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)),
                (4, (0, 255, 0), (0, 255, 255)), (11, (0, 255, 255), (0, 0, 255)),
                (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, start, end in segments:
        t = np.floor(255 * np.arange(n) / n) / 255
        start, end = np.array(start, float), np.array(end, float)
        rows.append(start + (end - start) * t[:, None])
    return np.concatenate(rows)


def flow_to_color(flow: FlowField, max_magnitude=None) -> np.ndarray:
    """``[H,W,3]`` uint8 render: hue = direction, saturation = magnitude / max.

    ``max_magnitude`` defaults to the 99th percentile of valid magnitudes.
    Invalid pixels are black.
    """
    m = flow.mask
    u = np.where(m, flow.u, 0.0).astype(np.float64)
    v = np.where(m, flow.v, 0.0).astype(np.float64) + 0.0  # -0.0 -> +0.0 keeps the angle of (m, 0) at the wheel start
    rad = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(rad[m], 99)) if m.any() else 0.0
    scale = max_magnitude if max_magnitude > 0 else 1.0
    wheel = make_colorwheel()
    ncols = len(wheel)
    r = rad / scale
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] / 255 + f * wheel[k1] / 255
    inside = (r <= 1)[..., None]
    rr = r[..., None]
    col = np.where(inside, 1 - rr * (1 - col), col * 0.75)
    img = np.floor(255 * col + 1e-9).astype(np.uint8)
    img[~m] = 0
    return img


def write_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img, np.uint8)
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + img.tobytes()


def save_image(path, img):
    path = str(path)
    blob = write_ppm(img) if path.endswith(".ppm") else encode_png(img)
    with open(path, "wb") as f:
        f.write(blob)

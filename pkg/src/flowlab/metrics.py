"""Flow accuracy metrics and the validation runner.

Conventions (the benchmark definitions these follow are not restated by the
experiments they support, so they are fixed here):

* Fl-all: a valid pixel is an outlier when its endpoint error is > 3 px
  **and** > 5 % of the ground-truth magnitude (KITTI rule).
* WAUC: inlier rate at 100 thresholds ``5*i/100`` px (i = 1..100), averaged
  with weights ``1 - t/5`` (VIPER-style convention, not an exact
  reproduction of any published evaluator).
* Boundary distance: Euclidean distance to the nearest pixel whose
  ground-truth flow gradient magnitude exceeds 1 px/px.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .flowio import FlowField

SPEED_BINS = (("s0-10", 0.0, 10.0), ("s10-40", 10.0, 40.0), ("s40+", 40.0, np.inf))
# last edge left open so the distance bins also partition the valid pixels
DIST_BINS = (("d0-10", 0.0, 10.0), ("d10-60", 10.0, 60.0), ("d60-140", 60.0, np.inf))
WAUC_THRESHOLDS = 5.0 * np.arange(1, 101) / 100
WAUC_WEIGHTS = 1.0 - WAUC_THRESHOLDS / 5.0
BOUNDARY_GRADIENT = 1.0


def _as_field(x) -> FlowField:
    if isinstance(x, FlowField):
        return x
    return FlowField.from_array(np.asarray(x))


def _errors(pred, gt):
    pred, gt = _as_field(pred), _as_field(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    m = gt.mask & pred.mask
    if not m.any():
        raise ValueError("no valid pixels to evaluate")
    du = pred.u.astype(np.float64) - gt.u
    dv = pred.v.astype(np.float64) - gt.v
    epe = np.hypot(du, dv)
    return epe, m, gt


def aepe(pred, gt) -> float:
    """Mean endpoint error over valid ground-truth pixels."""
    epe, m, _ = _errors(pred, gt)
    return float(epe[m].mean())


def outlier_mask(pred, gt):
    epe, m, gt = _errors(pred, gt)
    mag = gt.magnitude()
    return (epe > 3.0) & (epe > 0.05 * mag), m


def fl_all(pred, gt) -> float:
    """Percentage of valid pixels that are outliers."""
    out, m = outlier_mask(pred, gt)
    return 100.0 * float(out[m].sum()) / float(m.sum())


def wauc(pred, gt) -> float:
    epe, m, _ = _errors(pred, gt)
    e = np.sort(epe[m])
    rates = np.searchsorted(e, WAUC_THRESHOLDS, side="right") / e.size
    return float(100.0 * (rates * WAUC_WEIGHTS).sum() / WAUC_WEIGHTS.sum())


def boundary_distance(gt, threshold=BOUNDARY_GRADIENT) -> np.ndarray:
    """Distance (px) from each pixel to the nearest motion boundary; inf if none."""
    gt = _as_field(gt)
    grad = np.zeros(gt.shape)
    for comp in (gt.u, gt.v):
        gy, gx = np.gradient(np.asarray(comp, np.float64)) if min(gt.shape) > 1 else (0 * comp, 0 * comp)
        grad = np.maximum(grad, np.hypot(gx, gy))
    boundary = grad > threshold
    if not boundary.any():
        return np.full(gt.shape, np.inf)
    return ndimage.distance_transform_edt(~boundary)


def binned_aepe(pred, gt, speed_bins=SPEED_BINS, dist_bins=DIST_BINS, distance=None):
    """AEPE and pixel count per speed bin and per boundary-distance bin.

    Returns ``{label: (aepe or nan, count)}``.  Bins are half open
    ``[lo, hi)``; an infinite upper edge also takes infinite keys (no
    boundary anywhere), so the default bins partition the valid pixels.
    """
    for bins in (speed_bins, dist_bins):
        edges = [lo for _, lo, _ in bins] + [bins[-1][2]]
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be increasing")
    epe, m, gt = _errors(pred, gt)
    mag = gt.magnitude()
    dist = boundary_distance(gt) if distance is None else np.asarray(distance, np.float64)
    out = {}
    for bins, key in ((speed_bins, mag), (dist_bins, dist)):
        for label, lo, hi in bins:
            sel = m & (key >= lo) & ((key < hi) | (hi == np.inf))
            n = int(sel.sum())
            out[label] = (float(epe[sel].mean()) if n else float("nan"), n)
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("aepe", "fl_all", "wauc", "s0-10", "s10-40", "s40+", "d0-10", "d10-60", "d60-140")


@dataclass
class MetricReport:
    aepe: float
    fl_all: float
    wauc: float
    binned: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    pixels: int = 0
    samples: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def row(self, label="", columns=REPORT_COLUMNS) -> str:
        vals = []
        for c in columns:
            if c == "fl_all":
                vals.append(f"{self.fl_all:.2f}%")
            elif c in ("aepe", "wauc"):
                vals.append(f"{getattr(self, c):.3f}")
            else:
                v = self.binned.get(c, float("nan"))
                vals.append("n/a" if np.isnan(v) else f"{v:.3f}")
        return " | ".join([label] + vals) if label else " | ".join(vals)

    @staticmethod
    def header(columns=REPORT_COLUMNS, label="run") -> str:
        return " | ".join([label, *columns])


class _Accumulator:
    """Pixel-weighted aggregation with a fixed reduction order."""

    def __init__(self):
        self.epe_sum = 0.0
        self.outliers = 0
        self.wauc_sum = 0.0
        self.pixels = 0
        self.samples = 0
        self.bin_sum = {}
        self.bin_n = {}

    def add(self, pred, gt):
        epe, m, g = _errors(pred, gt)
        n = int(m.sum())
        out, _ = outlier_mask(pred, gt)
        self.epe_sum += float(epe[m].sum())
        self.outliers += int(out[m].sum())
        self.wauc_sum += wauc(pred, gt) * n
        self.pixels += n
        self.samples += 1
        for label, (val, cnt) in binned_aepe(pred, gt).items():
            if cnt:
                self.bin_sum[label] = self.bin_sum.get(label, 0.0) + val * cnt
            self.bin_n[label] = self.bin_n.get(label, 0) + cnt

    def report(self) -> MetricReport:
        if not self.pixels:
            raise ValueError("nothing evaluated")
        binned = {k: (self.bin_sum[k] / n if n else float("nan")) for k, n in self.bin_n.items()}
        return MetricReport(
            aepe=self.epe_sum / self.pixels,
            fl_all=100.0 * self.outliers / self.pixels,
            wauc=self.wauc_sum / self.pixels,
            binned=binned,
            counts=dict(self.bin_n),
            pixels=self.pixels,
            samples=self.samples,
        )


class SampleError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"evaluation failed on sample {index}: {cause}")
        self.index = index


def predict_flow(state, sample):
    """Run a model on one :class:`~flowlab.data.FlowSample`; returns ``[2,H,W]``."""
    from .arch import forward
    from .tensor import Tensor, no_grad

    with no_grad():
        f1 = Tensor(sample.frame1[None].astype(np.float32))
        f2 = Tensor(sample.frame2[None].astype(np.float32))
        return forward(state, f1, f2).final.data[0]


def evaluate(predictor, samples) -> MetricReport:
    """Aggregate metrics over ``samples``.

    ``predictor`` is a :class:`~flowlab.arch.ModelState` or a callable
    ``sample -> [2,H,W] flow``.  Aggregation is pixel weighted.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if callable(predictor):
        predict = predictor
    else:
        def predict(s):
            return predict_flow(predictor, s)
    acc = _Accumulator()
    for i, s in enumerate(samples):
        try:
            pred = predict(s)
            acc.add(FlowField.from_array(pred), FlowField.from_array(s.flow, s.valid))
        except Exception as exc:  # noqa: BLE001 - rewrapped with the sample index
            raise SampleError(i, exc) from exc
    return acc.report()

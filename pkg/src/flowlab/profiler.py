"""Cost-volume cost models and a timing / allocation harness.

Memory is read from the tensor library's own allocation registry, so the
numbers are exact byte counts of the buffers the forward pass creates, free
of host allocator noise.  Cost-volume allocations are those made under the
``"cost_volume"`` tag.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import BudgetExceeded, Tensor, no_grad, track_allocations

STRATEGIES = ("local", "all-pairs", "one-dim")
INT64_MAX = 2**63 - 1
ARCH_STRATEGY = {"pwc": "local", "irr": "local", "raft": "all-pairs"}


@dataclass(frozen=True)
class CostModel:
    strategy: str
    D: int = 1
    radius: int = 4
    with_reads: bool = False  # local only: add the H*W*D feature reads

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.D < 1 or self.radius < 0:
            raise ValueError("D must be >= 1 and radius >= 0")


def analytic_elements(model: CostModel, H: int, W: int) -> int:
    """Cost-volume entries for an ``H x W`` feature map (exact integer)."""
    if H < 1 or W < 1:
        raise ValueError(f"resolution must be positive, got {H}x{W}")
    H, W = int(H), int(W)
    hw = H * W
    if model.strategy == "local":
        n = hw * (2 * model.radius + 1) ** 2 + (hw * model.D if model.with_reads else 0)
    elif model.strategy == "all-pairs":
        n = hw * hw
    else:
        n = hw * (H + W)
    if n > INT64_MAX:
        raise OverflowError(f"{model.strategy} cost volume at {H}x{W} has {n} entries, beyond int64")
    return n


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

@dataclass
class Measurement:
    label: str
    resolution: tuple
    repeats: int
    times: list = field(default_factory=list)
    peak_bytes: int = 0
    cost_volume_bytes: int = 0       # largest single cost-volume buffer
    cost_volume_peak: int = 0        # peak simultaneously live cost-volume bytes
    analytic: int | None = None
    oom: bool = False
    note: str = ""

    @property
    def mean(self):
        return statistics.fmean(self.times) if self.times else float("nan")

    @property
    def std(self):
        return statistics.stdev(self.times) if len(self.times) > 1 else 0.0


def measure(run, resolution, repeats=20, label=""):
    """Call ``run()`` ``repeats`` times; the first call is a discarded warm-up.

    Each call is tracked separately; the reported peak is that of the last
    call.  A :class:`BudgetExceeded` from the closure yields an OOM record.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2 (the first run is discarded)")
    m = Measurement(label, tuple(resolution), repeats)
    for i in range(repeats):
        with track_allocations() as reg:
            t0 = time.perf_counter()
            try:
                run()
            except BudgetExceeded as exc:
                m.oom = True
                m.note = str(exc)
                m.times = []
                return m
            dt = time.perf_counter() - t0
        if i:
            m.times.append(dt)
        m.peak_bytes = reg.peak
        m.cost_volume_bytes = reg.tag_largest.get("cost_volume", 0)
        m.cost_volume_peak = reg.tag_peak.get("cost_volume", 0)
    return m


def forward_closure(state, resolution, seed=0):
    """Inference closure for one random frame pair at ``resolution``."""
    from .arch import forward

    H, W = resolution
    rng = np.random.default_rng(seed)
    a = rng.random((1, 3, H, W), dtype=np.float32)
    b = rng.random((1, 3, H, W), dtype=np.float32)

    def run():
        with no_grad():
            forward(state, Tensor(a), Tensor(b))

    return run


def cost_volume_shape(config, H, W):
    """``(h, w, D)`` of the finest cost volume the architecture builds."""
    if config.arch == "raft":
        return H // config.upsample, W // config.upsample, config.raft_dim
    return H // 2, W // 2, config.widths[0]


def arch_cost_model(config) -> CostModel:
    strategy = ARCH_STRATEGY[config.arch]
    radius = config.search_radius
    D = cost_volume_shape(config, 2, 2)[2]
    return CostModel(strategy, D=D, radius=radius)


def profile_arch(config, resolutions, repeats=20, seed=0):
    """Measure one architecture's inference at each resolution."""
    from .arch import build_model

    state = build_model(config, seed)
    model = arch_cost_model(config)
    rows = []
    for H, W in resolutions:
        config.check_input(H, W)
        h, w, _ = cost_volume_shape(config, H, W)
        m = measure(forward_closure(state, (H, W), seed), (H, W), repeats, label=config.arch)
        m.analytic = analytic_elements(model, h, w)
        rows.append(m)
    return rows


# ---------------------------------------------------------------------------
# fits and reports
# ---------------------------------------------------------------------------

def fit_scaling(areas, values):
    """Least-squares slope of ``log(value)`` against ``log(area)``.

    Returns ``(slope, residual)`` with the residual as RMS in log space.
    """
    x = np.log(np.asarray(areas, np.float64))
    y = np.log(np.asarray(values, np.float64))
    if x.size < 3:
        raise ValueError("need at least three resolutions to fit a slope")
    if np.unique(x).size < 2:
        raise ValueError("resolutions are identical; slope undefined")
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), resid


@dataclass
class ScalingReport:
    rows: dict                       # label -> list[Measurement]
    slopes: dict = field(default_factory=dict)        # label -> (slope, residual) on measured bytes
    analytic_slopes: dict = field(default_factory=dict)

    @classmethod
    def build(cls, rows: dict):
        rep = cls(rows)
        for label, ms in rows.items():
            ok = [m for m in ms if not m.oom and m.cost_volume_bytes > 0]
            if len(ok) >= 3:
                areas = [m.resolution[0] * m.resolution[1] for m in ok]
                rep.slopes[label] = fit_scaling(areas, [m.cost_volume_bytes for m in ok])
            if len(ms) >= 3:
                areas = [m.resolution[0] * m.resolution[1] for m in ms]
                rep.analytic_slopes[label] = fit_scaling(areas, [m.analytic for m in ms])
        return rep

    def table(self) -> str:
        """Time columns then memory columns, one per resolution; OOM cells marked."""
        labels = list(self.rows)
        res = [m.resolution for m in self.rows[labels[0]]] if labels else []
        names = [f"{h}x{w}" for h, w in res]
        head = ["model"] + [f"ms@{n}" for n in names] + [f"peakMB@{n}" for n in names] + [f"cvMB@{n}" for n in names]
        head += ["cv slope"]
        lines = [" | ".join(head)]
        for label in labels:
            ms = self.rows[label]
            times = ["OOM" if m.oom else f"{1e3 * m.mean:.1f}±{1e3 * m.std:.1f}" for m in ms]
            peaks = ["n/a" if m.oom else f"{m.peak_bytes / 2**20:.2f}" for m in ms]
            cvs = ["n/a" if m.oom else f"{m.cost_volume_bytes / 2**20:.3f}" for m in ms]
            s = self.slopes.get(label)
            slope = f"{s[0]:.3f} (res {s[1]:.1e})" if s else "n/a"
            lines.append(" | ".join([label, *times, *peaks, *cvs, slope]))
        return "\n".join(lines)

    def to_json(self) -> str:
        doc = {
            "rows": {k: [dict(asdict(m), mean=m.mean, std=m.std) for m in v] for k, v in self.rows.items()},
            "slopes": self.slopes,
            "analytic_slopes": self.analytic_slopes,
        }
        return json.dumps(doc, indent=1, default=float)

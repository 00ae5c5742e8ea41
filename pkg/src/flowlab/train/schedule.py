"""Learning-rate schedules, gradient clipping and the AdamW update."""
from __future__ import annotations

import numpy as np

BASE_DIVISOR = 25.0


def _lerp(a, b, t):
    # exact at both ends: t=0 -> a, t=1 -> b
    return a * (1.0 - t) + b * t


def peak_step(plan) -> int:
    return int(round(plan.peak_fraction * plan.total_steps))


def lr_at(plan, step: int) -> float:
    """Learning rate at ``step`` (0-based) of ``plan``.

    onecycle: linear from ``base_lr`` at step 0 to ``peak_lr`` at
    ``round(peak_fraction * total_steps)``, then linear back to ``base_lr`` at
    the last step.  piecewise: ``peak_lr`` times the product of every factor
    whose boundary (a fraction of ``total_steps``) has been passed.
    """
    T = plan.total_steps
    if not 0 <= step < T:
        raise ValueError(f"step {step} outside [0, {T})")
    peak = plan.peak_lr
    if plan.schedule == "piecewise":
        lr = peak
        for b, f in zip(plan.boundaries, plan.factors):
            if step >= round(b * T):
                lr *= f
        return float(lr)
    base = plan.base
    p = peak_step(plan)
    if step <= p:
        return float(_lerp(base, peak, step / p)) if p > 0 else float(peak)
    last = T - 1
    return float(_lerp(peak, base, (step - p) / (last - p)))


class GradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_gradients(grads: dict, threshold):
    """Scale all gradients jointly so their global L2 norm is at most ``threshold``.

    Returns ``(clipped, pre_norm)``.  ``threshold=None`` disables clipping.
    """
    if threshold is not None and not threshold > 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(name)
    norm = global_norm(grads)
    if threshold is None or norm <= threshold:
        return dict(grads), norm
    scale = threshold / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


class AdamW:
    """Adaptive moments with decoupled weight decay.

    The decay shrinks parameters by ``weight_decay`` per step independently of
    the learning rate, so a zero learning rate still applies it.
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - self.weight_decay)
            if lr:
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data -= (lr * upd).astype(p.data.dtype, copy=False)

    def state_arrays(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_arrays(self, arrays, t):
        self.t = int(t)
        self.m = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: np.array(v) for k, v in arrays.items() if k.startswith("v/")}

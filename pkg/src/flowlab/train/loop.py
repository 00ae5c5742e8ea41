"""Training plans, step records and the pre-training / fine-tuning loops."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from ..arch import ModelConfig, ModelState, build_model, checkpoint, forward
from ..data import AugmentPolicy, DatasetMixture, SceneSpec, augment, draw
from ..seeding import stream
from ..tensor import Tensor, backward
from .losses import default_level_weights, loss_multiscale, loss_sequence
from .schedule import BASE_DIVISOR, AdamW, GradientError, clip_gradients, lr_at

SCHEDULES = ("onecycle", "piecewise")


@dataclass(frozen=True)
class TrainPlan:
    total_steps: int = 1000
    batch_size: int = 1
    peak_lr: float = 4e-4
    base_lr: float | None = None          # onecycle start/end; default peak_lr / 25
    schedule: str = "onecycle"
    peak_fraction: float = 0.2
    boundaries: tuple = (0.5, 0.75)       # piecewise: fractions of total_steps
    factors: tuple = (0.5, 0.5)
    clip: float | None = 1.0
    weight_decay: float = 0.0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    mixture: DatasetMixture = field(default_factory=lambda: DatasetMixture.single(SceneSpec()))
    size: tuple = (64, 96)
    fixed_sample: bool = False            # overfit mode: every batch is draw 0
    level_weights: tuple | None = None    # pyramid models; default finest-heavy
    gamma: float = 0.8                    # raft sequence loss
    loss_q: float = 1.0
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("boundaries", "factors", "size"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.level_weights is not None:
            object.__setattr__(self, "level_weights", tuple(self.level_weights))
        self.validate()

    def validate(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not 0.0 < self.peak_fraction < 1.0:
            raise ValueError(f"peak_fraction must be in (0, 1), got {self.peak_fraction}")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip threshold must be positive (or null to disable)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if len(self.boundaries) != len(self.factors):
            raise ValueError("boundaries and factors must have equal length")
        if list(self.boundaries) != sorted(self.boundaries) or not all(0 < b < 1 for b in self.boundaries):
            raise ValueError("piecewise boundaries must be increasing fractions in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")

    @property
    def base(self) -> float:
        return self.base_lr if self.base_lr is not None else self.peak_lr / BASE_DIVISOR

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["augment"] = dataclasses.asdict(self.augment)
        d["mixture"] = self.mixture.to_dict()
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train plan keys: {sorted(unknown)}")
        if "augment" in d:
            d["augment"] = AugmentPolicy.from_dict(d["augment"])
        if "mixture" in d and isinstance(d["mixture"], dict):
            d["mixture"] = DatasetMixture.from_dict(d["mixture"])
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class TrainRecord:
    """Ordered step and evaluation entries, serialised one JSON object per line."""

    def __init__(self, entries=None):
        self.entries = list(entries or [])

    def log_step(self, step, lr, grad_norm, clipped_norm, loss):
        self.entries.append({
            "kind": "step", "step": int(step), "lr": float(lr), "grad_norm": float(grad_norm),
            "clipped_norm": float(clipped_norm), "loss": float(loss),
        })

    def log_eval(self, step, split, report: metrics.MetricReport):
        self.entries.append({
            "kind": "eval", "step": int(step), "split": split, "aepe": report.aepe,
            "fl_all": report.fl_all, "wauc": report.wauc,
        })

    def steps(self):
        return [e for e in self.entries if e["kind"] == "step"]

    def evals(self, split=None):
        return [e for e in self.entries if e["kind"] == "eval" and (split is None or e["split"] == split)]

    def extend(self, other):
        self.entries.extend(other.entries)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def __len__(self):
        return len(self.entries)


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    ``state`` holds the parameters from before the failing step and
    ``checkpoint`` the path of the last checkpoint written (if any); neither
    is overwritten by the failing step.
    """

    def __init__(self, step, reason, state, record, checkpoint=None):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.state = state
        self.record = record
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# batches and losses
# ---------------------------------------------------------------------------

def batch_samples(plan: TrainPlan, step: int):
    """Samples of the batch at ``step``; draw ``k`` depends only on ``(seed, k)``."""
    out = []
    for b in range(plan.batch_size):
        k = 0 if plan.fixed_sample else step * plan.batch_size + b
        _, s = draw(plan.mixture, plan.seed, k, plan.size)
        if not plan.augment.identity:
            s = augment(s, plan.augment, stream(plan.seed, "augment", step * plan.batch_size + b))
        out.append(s)
    return out


def _stack(samples, dtype):
    f1 = np.stack([s.frame1 for s in samples]).astype(dtype)
    f2 = np.stack([s.frame2 for s in samples]).astype(dtype)
    gt = np.stack([s.flow for s in samples]).astype(np.float64)
    valid = np.stack([s.valid for s in samples])
    return f1, f2, gt, valid


def compute_loss(state: ModelState, plan: TrainPlan, samples):
    dtype = next(iter(state.params.values())).dtype
    f1, f2, gt, valid = _stack(samples, dtype)
    pred = forward(state, Tensor(f1), Tensor(f2))
    v = None if valid.all() else valid
    if state.arch == "raft":
        return loss_sequence(pred, gt, plan.gamma, v, plan.loss_q)
    weights = plan.level_weights or default_level_weights(len(pred.intermediates))
    return loss_multiscale(pred, gt, weights, v, plan.loss_q)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def _checkpoint_path(directory, step):
    return os.path.join(directory, f"step{step:07d}.ckpt")


def save_training_state(path, state, opt, step, plan):
    meta = {"step": int(step), "adam_t": opt.t, "plan": plan.fingerprint()}
    tmp = f"{path}.tmp"
    checkpoint.save(tmp, state, opt.state_arrays(), meta)
    os.replace(tmp, path)


def load_training_state(path, plan=None, expect_fingerprint=None):
    state, arrays, meta = checkpoint.loads(open(path, "rb").read(), expect_fingerprint)
    if plan is not None and meta.get("plan") not in (None, plan.fingerprint()):
        raise checkpoint.CheckpointError("checkpoint was written under a different train plan")
    opt = AdamW()
    opt.load_arrays(arrays, meta.get("adam_t", 0))
    return state, opt, int(meta.get("step", 0))


def latest_checkpoint(directory):
    if not directory or not os.path.isdir(directory):
        return None
    names = sorted(n for n in os.listdir(directory) if n.startswith("step") and n.endswith(".ckpt"))
    return os.path.join(directory, names[-1]) if names else None


def _evaluate(state, eval_sets, step, record):
    for split, samples in (eval_sets or {}).items():
        record.log_eval(step, split, metrics.evaluate(state, samples))


def run(state: ModelState, plan: TrainPlan, *, eval_sets=None, checkpoint_dir=None,
        resume=None, until=None, on_step=None):
    """Execute ``plan`` on ``state`` (updated in place) and return ``(state, record)``.

    ``resume`` is a checkpoint path to continue from; ``until`` stops early
    after that many total steps (writing a checkpoint if ``checkpoint_dir``
    is set), which is how an interrupted run is simulated.  Every set in
    ``eval_sets`` is evaluated at step 0, every ``eval_every`` steps and at
    the final step.
    """
    opt = AdamW(weight_decay=plan.weight_decay)
    start = 0
    if resume is not None:
        state, saved, start = load_training_state(resume, plan, state.config.fingerprint())
        opt.m, opt.v, opt.t = saved.m, saved.v, saved.t
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    stop = plan.total_steps if until is None else min(until, plan.total_steps)
    record = TrainRecord()
    last_ckpt = resume
    params = state.params
    if start == 0:
        _evaluate(state, eval_sets, 0, record)
    for step in range(start, stop):
        samples = batch_samples(plan, step)
        loss = compute_loss(state, plan, samples)
        lval = float(loss.data)
        if not np.isfinite(lval):
            raise TrainingDiverged(step, f"loss is {lval}", state, record, last_ckpt)
        grads = backward(loss, list(params.values()))
        named = {k: grads[p] for k, p in params.items()}
        try:
            clipped, pre = clip_gradients(named, plan.clip)
        except GradientError as exc:
            raise TrainingDiverged(step, str(exc), state, record, last_ckpt) from exc
        post = pre if plan.clip is None else min(pre, plan.clip)
        if plan.clip is not None and pre > plan.clip:
            post = float(np.sqrt(sum(float(np.vdot(g, g)) for g in clipped.values())))
        lr = lr_at(plan, step)
        opt.step(params, clipped, lr)
        for p in params.values():
            p.grad = None
        record.log_step(step, lr, pre, post, lval)
        if on_step is not None:
            on_step(step, record)
        done = step + 1
        if plan.eval_every and done % plan.eval_every == 0:
            _evaluate(state, eval_sets, done, record)
        if checkpoint_dir and plan.checkpoint_every and done % plan.checkpoint_every == 0:
            last_ckpt = _checkpoint_path(checkpoint_dir, done)
            save_training_state(last_ckpt, state, opt, done, plan)
    if checkpoint_dir and stop > start:
        last_ckpt = _checkpoint_path(checkpoint_dir, stop)
        save_training_state(last_ckpt, state, opt, stop, plan)
    evaluated = plan.eval_every and stop % plan.eval_every == 0
    if stop == plan.total_steps and stop > start and not evaluated:
        _evaluate(state, eval_sets, stop, record)
    return state, record


def pretrain(config: ModelConfig, plan: TrainPlan, **kw):
    """Train a freshly initialised model; initialisation uses the plan seed."""
    state = build_model(config, plan.seed)
    return run(state, plan, **kw)


def finetune(initial: ModelState, plan: TrainPlan, *, config: ModelConfig | None = None, **kw):
    """Continue training ``initial`` on ``plan``'s mixture.

    The input state is never modified.  With ``total_steps == 0`` the output
    parameters equal the input bit for bit and the record holds the
    initialisation metrics.
    """
    if config is not None and config.fingerprint() != initial.config.fingerprint():
        raise checkpoint.CheckpointError(
            f"config fingerprint mismatch: model {initial.config.fingerprint()}, expected {config.fingerprint()}"
        )
    return run(initial.copy(), plan, **kw)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab.arch import ModelConfig, build_model
from flowlab.arch.config import FlowPrediction
from flowlab.data import AugmentPolicy, DatasetMixture, SceneSpec, generate_sample
from flowlab.tensor import Tensor, backward
from flowlab.train import (
    AdamW,
    GradientError,
    TrainingDiverged,
    TrainPlan,
    TrainRecord,
    clip_gradients,
    default_level_weights,
    downsample_flow,
    endpoint_error,
    finetune,
    global_norm,
    latest_checkpoint,
    loss_multiscale,
    loss_sequence,
    lr_at,
    peak_step,
    pretrain,
    run,
)

SMALL = dict(widths=(8, 8, 8, 8), decoder_widths=(8,), raft_dim=8, raft_hidden=8, raft_context=8, raft_iters=2)
TINY_PLAN = dict(size=(32, 48), mixture=DatasetMixture.single(SceneSpec()), peak_lr=1e-3)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_frozen_values():
    plan = TrainPlan(total_steps=101, peak_lr=1e-3)
    assert lr_at(plan, 0) == 1e-3 / 25
    assert peak_step(plan) == 20
    assert lr_at(plan, 20) == 1e-3
    assert lr_at(plan, 10) == pytest.approx((1e-3 / 25 + 1e-3) / 2, rel=1e-12)
    assert lr_at(plan, 100) == 1e-3 / 25
    with pytest.raises(ValueError):
        lr_at(plan, 101)
    with pytest.raises(ValueError):
        lr_at(plan, -1)


@settings(max_examples=50, deadline=None)
@given(st.integers(6, 100_000), st.floats(1e-6, 1e-2), st.sampled_from([0.1, 0.2, 0.3]))
def test_onecycle_shape(T, peak, frac):
    plan = TrainPlan(total_steps=T, peak_lr=peak, peak_fraction=frac)
    p = peak_step(plan)
    assert lr_at(plan, 0) == plan.base
    assert lr_at(plan, p) == peak
    assert lr_at(plan, T - 1) == plan.base
    steps = np.unique(np.linspace(0, T - 1, 50).astype(int))
    lrs = [lr_at(plan, int(s)) for s in steps]
    assert max(lrs) <= peak
    # monotone up to the peak, then down
    up = [lr for s, lr in zip(steps, lrs) if s <= p]
    down = [lr for s, lr in zip(steps, lrs) if s >= p]
    assert all(a <= b * (1 + 1e-12) for a, b in zip(up, up[1:]))
    assert all(a >= b * (1 - 1e-12) for a, b in zip(down, down[1:]))


def test_piecewise():
    plan = TrainPlan(total_steps=100, peak_lr=1.0, schedule="piecewise", boundaries=(0.5, 0.75), factors=(0.5, 0.1))
    assert lr_at(plan, 0) == 1.0 and lr_at(plan, 49) == 1.0
    assert lr_at(plan, 50) == 0.5 and lr_at(plan, 74) == 0.5
    assert lr_at(plan, 75) == pytest.approx(0.05) and lr_at(plan, 99) == pytest.approx(0.05)


def test_plan_validation_and_round_trip():
    for bad in (dict(peak_fraction=0.0), dict(clip=0.0), dict(weight_decay=-1), dict(schedule="cosine"),
                dict(boundaries=(0.8, 0.2)), dict(total_steps=-1)):
        with pytest.raises(ValueError):
            TrainPlan(**bad)
    plan = TrainPlan(clip=None, augment=AugmentPolicy(vflip_prob=0.1), weight_decay=1e-7)
    again = TrainPlan.from_dict(plan.to_dict())
    assert again == plan and again.fingerprint() == plan.fingerprint()
    with pytest.raises(ValueError, match="unknown"):
        TrainPlan.from_dict({"epochs": 3})


# ---------------------------------------------------------------------------
# clipping and the optimiser
# ---------------------------------------------------------------------------

def test_clip_examples():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5) and np.array_equal(out["a"], g["a"])
    out, norm = clip_gradients({"a": np.array([3.0, 4.0])}, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(out["a"], [0.6, 0.8], rtol=1e-15)
    out, norm = clip_gradients({"a": np.array([30.0, 40.0])}, None)
    assert norm == 50.0 and out["a"][0] == 30.0


def test_clip_nan_names_parameter():
    with pytest.raises(GradientError, match="conv2.w"):
        clip_gradients({"conv1.w": np.ones(2), "conv2.w": np.array([1.0, np.nan])}, 1.0)
    with pytest.raises(ValueError):
        clip_gradients({"a": np.ones(2)}, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.5, 1.0, 2.0]))
def test_clip_property(seed, threshold):
    rng = np.random.default_rng(seed)
    grads = {f"p{i}": rng.standard_normal(rng.integers(1, 20)) * rng.choice([0.01, 1, 10]) for i in range(4)}
    out, pre = clip_gradients(grads, threshold)
    assert abs(global_norm(out) - min(pre, threshold)) <= 1e-6
    a = np.concatenate(list(grads.values()))
    b = np.concatenate(list(out.values()))
    assert np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)) >= 1 - 1e-6


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return {"w": Tensor(rng.standard_normal((3, 4)).astype(np.float32)), "b": Tensor(rng.standard_normal(4).astype(np.float32))}


def test_adamw_zero_lr_zero_decay_bit_identical():
    params = _params()
    before = {k: p.data.copy() for k, p in params.items()}
    grads = {k: np.random.default_rng(1).standard_normal(p.shape).astype(np.float32) for k, p in params.items()}
    AdamW(weight_decay=0.0).step(params, grads, 0.0)
    for k in params:
        assert params[k].data.tobytes() == before[k].tobytes()


def test_adamw_zero_lr_applies_only_decay():
    params = _params()
    before = {k: p.data.copy() for k, p in params.items()}
    grads = {k: np.ones(p.shape, np.float32) for k, p in params.items()}
    AdamW(weight_decay=1e-3).step(params, grads, 0.0)
    for k in params:
        np.testing.assert_array_equal(params[k].data, before[k] * np.float32(1 - 1e-3))


def test_adamw_first_step_oracle():
    # first step with bias correction moves each weight by lr * sign(g)
    params = {"w": Tensor(np.zeros(3))}
    AdamW().step(params, {"w": np.array([2.0, -0.5, 1e-3])}, 0.1)
    np.testing.assert_allclose(params["w"].data, [-0.1, 0.1, -0.1], rtol=1e-4)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _epe_np(a, b):
    return np.sqrt(((a - b) ** 2).sum(axis=1))


def test_endpoint_error_zero_gradient_at_zero():
    d = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
    g = backward(endpoint_error(d).sum(), [d])[d]
    assert np.array_equal(g, np.zeros_like(g))


def test_multiscale_oracle():
    rng = np.random.default_rng(0)
    gt = rng.standard_normal((2, 2, 16, 16)) * 5
    scales = [8, 4, 2]
    flows = [Tensor(rng.standard_normal((2, 2, 16 // s, 16 // s))) for s in scales]
    pred = FlowPrediction(flows[-1], list(zip(flows, scales)))
    weights = [0.3, 0.6, 1.2]
    expect = 0.0
    for w, f, s in zip(weights, flows, scales):
        g = np.zeros_like(f.data)
        for i in range(16 // s):
            for j in range(16 // s):
                g[:, :, i, j] = gt[:, :, i * s:(i + 1) * s, j * s:(j + 1) * s].mean(axis=(2, 3)) / s
        expect += w * _epe_np(f.data, g).mean()
    assert abs(float(loss_multiscale(pred, gt, weights).data) - expect) < 1e-6


def test_multiscale_zero_and_linearity():
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((1, 2, 8, 8))
    exact = FlowPrediction(None, [(Tensor(downsample_flow(gt, s)), s) for s in (4, 2)])
    assert float(loss_multiscale(exact, gt, [1.0, 1.0]).data) == 0.0
    noisy = FlowPrediction(None, [(Tensor(rng.standard_normal((1, 2, 8 // s, 8 // s))), s) for s in (4, 2)])
    one = float(loss_multiscale(noisy, gt, [1.0, 0.0]).data)
    two = float(loss_multiscale(noisy, gt, [2.0, 0.0]).data)
    both = float(loss_multiscale(noisy, gt, [2.0, 1.0]).data)
    assert two == pytest.approx(2 * one, rel=1e-12)
    assert both - two == pytest.approx(float(loss_multiscale(noisy, gt, [0.0, 1.0]).data), rel=1e-9)
    with pytest.raises(ValueError, match="weights"):
        loss_multiscale(noisy, gt, [1.0])


def test_sequence_oracle():
    rng = np.random.default_rng(2)
    gt = rng.standard_normal((1, 2, 6, 6))
    flows = [Tensor(rng.standard_normal((1, 2, 6, 6))) for _ in range(4)]
    pred = FlowPrediction(flows[-1], [(f, 1) for f in flows])
    expect = sum(0.8 ** (4 - i) * _epe_np(f.data, gt).mean() for i, f in enumerate(flows, start=1))
    assert abs(float(loss_sequence(pred, gt, 0.8).data) - expect) < 1e-9
    assert float(loss_sequence(pred, gt, 1.0).data) == pytest.approx(sum(_epe_np(f.data, gt).mean() for f in flows))
    single = FlowPrediction(flows[0], [(flows[0], 1)])
    assert float(loss_sequence(single, gt, 0.8).data) == pytest.approx(_epe_np(flows[0].data, gt).mean())
    with pytest.raises(ValueError):
        loss_sequence(FlowPrediction(None, []), gt)


def test_default_level_weights():
    assert default_level_weights(3) == (0.25, 0.5, 1.0)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def test_pretrain_deterministic_and_clipped():
    cfg = ModelConfig(arch="pwc", **SMALL)
    plan = TrainPlan(total_steps=4, clip=0.5, **TINY_PLAN)
    a, rec_a = pretrain(cfg, plan)
    b, rec_b = pretrain(cfg, plan)
    for k in a.params:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert rec_a.to_jsonl() == rec_b.to_jsonl()
    steps = rec_a.steps()
    assert [e["step"] for e in steps] == [0, 1, 2, 3]
    assert all(e["clipped_norm"] <= 0.5 + 1e-6 for e in steps)
    assert [e["lr"] for e in steps] == [lr_at(plan, s) for s in range(4)]


def test_record_round_trip(tmp_path):
    rec = TrainRecord()
    rec.log_step(0, 1e-4, 3.0, 1.0, 0.5)
    rec.write(tmp_path / "r.jsonl")
    assert TrainRecord.read(tmp_path / "r.jsonl").entries == rec.entries


def test_finetune_zero_steps_identity():
    cfg = ModelConfig(arch="irr", **SMALL)
    init = build_model(cfg, 3)
    val = [generate_sample(SceneSpec(), (32, 48), 1)]
    plan = TrainPlan(total_steps=0, **TINY_PLAN)
    out, rec = finetune(init, plan, config=cfg, eval_sets={"train": val, "val": val})
    assert out is not init
    for k in init.params:
        assert out[k].data.tobytes() == init[k].data.tobytes()
    assert {e["split"] for e in rec.evals()} == {"train", "val"}
    assert not rec.steps()


def test_finetune_fingerprint_mismatch():
    from flowlab.arch.checkpoint import CheckpointError

    init = build_model(ModelConfig(arch="pwc", **SMALL), 0)
    with pytest.raises(CheckpointError, match="fingerprint"):
        finetune(init, TrainPlan(total_steps=0, **TINY_PLAN), config=ModelConfig(arch="irr", **SMALL))


def test_finetune_leaves_input_untouched():
    init = build_model(ModelConfig(arch="pwc", **SMALL), 0)
    before = {k: p.data.copy() for k, p in init.params.items()}
    out, _ = finetune(init, TrainPlan(total_steps=2, **TINY_PLAN))
    assert all(np.array_equal(init[k].data, before[k]) for k in before)
    assert any(not np.array_equal(out[k].data, before[k]) for k in before)


def test_divergence_keeps_last_good_state(tmp_path):
    cfg = ModelConfig(arch="pwc", **SMALL)
    state = build_model(cfg, 0)
    plan = TrainPlan(total_steps=3, checkpoint_every=1, **TINY_PLAN)
    name = next(k for k in state.params if k.endswith(".w"))
    calls = []

    def poison(step, record):
        calls.append(step)
        if step == 0:
            state[name].data[...] = np.nan

    with pytest.raises(TrainingDiverged) as info:
        run(state, plan, checkpoint_dir=tmp_path, on_step=poison)
    err = info.value
    assert err.step == 1
    assert err.checkpoint and err.checkpoint.endswith("step0000001.ckpt")
    assert len(err.record.steps()) == 1


def test_resume_bit_exact(tmp_path):
    cfg = ModelConfig(arch="pwc", **SMALL)
    plan = TrainPlan(total_steps=6, augment=AugmentPolicy(vflip_prob=0.5, erase_prob=0.5), **TINY_PLAN)
    full, rec_full = pretrain(cfg, plan)
    pretrain(cfg, plan, checkpoint_dir=tmp_path, until=3)
    ckpt = latest_checkpoint(tmp_path)
    assert ckpt.endswith("step0000003.ckpt")
    resumed, rec_tail = run(build_model(cfg, 99), plan, resume=ckpt)
    for k in full.params:
        assert resumed[k].data.tobytes() == full[k].data.tobytes()
    assert rec_tail.steps() == rec_full.steps()[3:]

import numpy as np
import pytest

from flowlab.arch import ModelConfig, build_model, checkpoint, forward, param_shapes
from flowlab.arch.raft import convex_upsample, forward_raft
from flowlab.tensor import BudgetExceeded, Tensor, backward, resize_bilinear, track_allocations

# layer-shape arithmetic for PWC-mini, levels 4, widths (16,32,48,64), d=4,
# decoder widths (48,32):
#   encoder  sum_l 9*(cin*w + w*w) + 2w           = 115952
#   decoders sum_l 9*((81+w+2)*48 + 48*32 + 32*2) + 48+32+2 = 270472
PWC_GOLDEN = 386424

SMALL = dict(widths=(8, 8, 8, 8), decoder_widths=(8,), raft_dim=8, raft_hidden=8, raft_context=8, raft_iters=3)


def frames(H=32, W=48, N=1, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((N, 3, H, W), dtype=np.float32)), Tensor(rng.random((N, 3, H, W), dtype=np.float32))


def test_pwc_param_count_golden():
    cfg = ModelConfig(arch="pwc", levels=4, widths=(16, 32, 48, 64), search_radius=4)
    assert build_model(cfg, 0).num_params == PWC_GOLDEN


def test_irr_smaller_than_pwc():
    for widths in [(16, 32, 48, 64), (8, 8, 8, 8)]:
        pwc = build_model(ModelConfig(arch="pwc", widths=widths), 0)
        irr = build_model(ModelConfig(arch="irr", widths=widths), 0)
        assert irr.num_params < pwc.num_params


def test_irr_decoder_names_level_independent():
    names3 = {n for n in param_shapes(ModelConfig(arch="irr", levels=3, widths=(8, 8, 8))) if n.startswith("dec.")}
    names5 = {n for n in param_shapes(ModelConfig(arch="irr", levels=5, widths=(8,) * 5)) if n.startswith("dec.")}
    assert names3 == names5


@pytest.mark.parametrize("arch", ["pwc", "irr", "raft"])
def test_build_deterministic(arch):
    cfg = ModelConfig(arch=arch, **SMALL)
    a, b = build_model(cfg, 5), build_model(cfg, 5)
    c = build_model(cfg, 6)
    for k in a.params:
        assert np.array_equal(a[k].data, b[k].data)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a.params if k.endswith(".w"))


@pytest.mark.parametrize("arch", ["pwc", "irr", "raft"])
def test_forward_contract(arch):
    cfg = ModelConfig(arch=arch, **SMALL)
    state = build_model(cfg, 0)
    f1, f2 = frames(N=2)
    pred = forward(state, f1, f2)
    assert pred.final.shape == (2, 2, 32, 48)
    n = cfg.levels if arch != "raft" else cfg.raft_iters
    assert len(pred.intermediates) == n
    again = forward(state, f1, f2)
    assert np.array_equal(pred.final.data, again.final.data)
    last, scale = pred.intermediates[-1]
    if arch == "raft":
        assert scale == 1 and np.array_equal(pred.final.data, last.data)
    else:
        # intermediates are coarse to fine; final is the finest one upsampled
        assert [s for _, s in pred.intermediates] == [16, 8, 4, 2]
        up = resize_bilinear(last, (32, 48)).data * 2
        np.testing.assert_allclose(pred.final.data, up, rtol=1e-6)


@pytest.mark.parametrize("arch", ["pwc", "irr", "raft"])
def test_identical_frames_finite(arch):
    state = build_model(ModelConfig(arch=arch, **SMALL), 1)
    f1, _ = frames()
    assert np.isfinite(forward(state, f1, f1).final.data).all()


@pytest.mark.parametrize("arch,shape", [("pwc", (30, 48)), ("raft", (32, 44))])
def test_divisibility_rejected(arch, shape):
    state = build_model(ModelConfig(arch=arch, **SMALL), 0)
    f1, f2 = frames(*shape)
    with pytest.raises(ValueError, match="divisible"):
        forward(state, f1, f2)


def test_invalid_configs():
    with pytest.raises(ValueError):
        ModelConfig(arch="flownet")
    with pytest.raises(ValueError):
        ModelConfig(levels=1, widths=(8,))
    with pytest.raises(ValueError):
        ModelConfig(search_radius=-1)
    with pytest.raises(ValueError):
        ModelConfig(raft_iters=0)


def test_irr_shared_decoder_gets_all_levels():
    cfg = ModelConfig(arch="irr", **SMALL)
    state = build_model(cfg, 0)
    f1, f2 = frames()
    w = state["dec.flow.w"]

    def grad_for(levels):
        pred = forward(state, f1, f2)
        loss = None
        for i, (flow, _) in enumerate(pred.intermediates):
            if i in levels:
                term = flow.sum()
                loss = term if loss is None else loss + term
        return backward(loss, state.parameters())[w].copy()

    full = grad_for({0, 1, 2, 3})
    parts = [grad_for({i}) for i in range(4)]
    assert not np.allclose(full, parts[3])
    np.testing.assert_allclose(full, sum(parts), rtol=1e-3, atol=1e-4)


def test_convex_upsample_weights_sum_to_one():
    rng = np.random.default_rng(0)
    flow = Tensor(rng.standard_normal((1, 2, 3, 4)).astype(np.float32))
    mask = Tensor(rng.standard_normal((1, 9 * 16, 3, 4)).astype(np.float32) * 10)
    up, m = convex_upsample(flow, mask, 4)
    assert up.shape == (1, 2, 12, 16)
    assert np.abs(m.data.sum(axis=2) - 1).max() <= 1e-6


def test_convex_upsample_constant_flow():
    flow = Tensor(np.ones((1, 2, 3, 3), np.float32))
    up, _ = convex_upsample(flow, Tensor(np.zeros((1, 9 * 4, 3, 3), np.float32)), 2)
    # interior pixel: every neighbour is 1, scaled by the factor
    np.testing.assert_allclose(up.data[0, :, 2:4, 2:4], 2.0)


def test_raft_allpairs_allocation_exact():
    cfg = ModelConfig(arch="raft", **SMALL)
    state = build_model(cfg, 0)
    f1, f2 = frames(32, 48)
    with track_allocations() as reg:
        forward_raft(state, f1, f2)
    h, w = 32 // cfg.upsample, 48 // cfg.upsample
    assert reg.tag_elements["cost_volume"][0] == (h * w) ** 2
    assert reg.tag_largest["cost_volume"] == (h * w) ** 2 * 4


def test_raft_budget_error(monkeypatch):
    monkeypatch.setenv("FLOWLAB_ALLPAIRS_BUDGET", "1000")
    state = build_model(ModelConfig(arch="raft", **SMALL), 0)
    with pytest.raises(BudgetExceeded):
        forward(state, *frames(32, 48))


@pytest.mark.parametrize("arch", ["pwc", "irr", "raft"])
def test_checkpoint_round_trip(tmp_path, arch):
    cfg = ModelConfig(arch=arch, **SMALL)
    state = build_model(cfg, 3)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, state, extra_meta={"seed": 3})
    loaded, _, meta = checkpoint.load(path, expect_fingerprint=cfg.fingerprint())
    assert meta == {"seed": 3}
    assert list(loaded.params) == list(state.params)
    for k in state.params:
        assert loaded[k].data.tobytes() == state[k].data.tobytes()
    f1, f2 = frames()
    assert np.array_equal(forward(loaded, f1, f2).final.data, forward(state, f1, f2).final.data)


def test_checkpoint_fingerprint_mismatch(tmp_path):
    state = build_model(ModelConfig(arch="pwc", **SMALL), 0)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, state)
    other = ModelConfig(arch="irr", **SMALL)
    with pytest.raises(checkpoint.CheckpointError, match="fingerprint"):
        checkpoint.load(path, expect_fingerprint=other.fingerprint())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"PK\x05\x06" + b"\0" * 18)


def test_config_dict_round_trip():
    cfg = ModelConfig(arch="raft", raft_iters=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"arch": "pwc", "depth": 3})

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowlab import metrics
from flowlab.data import (
    FINETUNE_MIX,
    IN_DISTRIBUTION,
    OUT_OF_DISTRIBUTION,
    AugmentPolicy,
    DatasetMixture,
    FlowSample,
    Layer,
    Motion,
    Scene,
    SceneSpec,
    augment,
    build_splits,
    consistent_mask,
    crop,
    draw,
    erase,
    generate_sample,
    motion_histogram,
    overlap_coefficient,
    read_manifest,
    regenerate,
    render_scene,
    sample_scene,
    sample_mixture,
    vflip,
    write_manifest,
)
from flowlab.data.splits import MAGNITUDE_EDGES
from flowlab.seeding import stream
from flowlab.tensor import Tensor, ops

SIZE = (32, 48)


def _texture():
    return {"base": [0.5, 0.4, 0.6], "waves": [(0.05, 0.02, 0.3, [0.1, 0.05, 0.08])]}


def test_static_scene():
    spec = SceneSpec(translation=(0.0, 0.0), max_rotation=0.0, max_scale=0.0)
    for seed in range(5):
        s = generate_sample(spec, SIZE, seed)
        assert np.array_equal(s.frame1, s.frame2)
        assert not s.flow.any()
        assert s.valid.all()


def test_global_translation():
    scene = Scene([Layer("plane", (0.0, 0.0), {}, _texture(), Motion(3.0, -2.0))])
    s = render_scene(scene, SIZE)
    assert (s.flow[0] == 3.0).all() and (s.flow[1] == -2.0).all()
    # frame2 at (x, y) shows frame1 at (x - 3, y + 2)
    np.testing.assert_allclose(s.frame2[:, :-2, 3:], s.frame1[:, 2:, :-3], atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_photometric_consistency(seed):
    spec = SceneSpec(num_layers=(2, 3))
    s = generate_sample(spec, SIZE, seed)
    H, W = SIZE
    ys, xs = np.mgrid[0:H, 0:W]
    coords = np.stack([xs + s.flow[0], ys + s.flow[1]])[None].astype(np.float64)
    warped = ops.bilinear_sample(Tensor(s.frame2[None].astype(np.float64)), Tensor(coords)).data[0]
    m = consistent_mask(s)
    assert m.mean() > 0.5
    err = np.abs(warped - s.frame1)[:, m].mean()
    assert err <= 2 / 255


def test_flow_exact_per_layer():
    scene = sample_scene(SceneSpec(num_layers=(3, 3)), SIZE, 4)
    s = render_scene(scene, SIZE)
    ys, xs = np.mgrid[0:SIZE[0], 0:SIZE[1]].astype(float)
    for idx, layer in enumerate(scene.layers):
        m = s.layers1 == idx
        fx, fy = layer.forward(xs[m], ys[m])
        np.testing.assert_allclose(s.flow[0][m], fx - xs[m], atol=1e-5)
        np.testing.assert_allclose(s.flow[1][m], fy - ys[m], atol=1e-5)


def test_flow_within_bound_and_layers_nonempty():
    spec = SceneSpec(translation=(2.0, 5.0))
    ys, xs = np.mgrid[0:SIZE[0], 0:SIZE[1]].astype(float)
    for seed in range(20):
        s = generate_sample(spec, SIZE, seed)
        assert np.hypot(s.flow[0], s.flow[1]).max() <= spec.flow_bound + 1e-4
        for layer in sample_scene(spec, SIZE, seed).layers:
            assert layer.contains(xs, ys).any()


def test_generate_deterministic():
    a = generate_sample(SceneSpec(), SIZE, 11)
    b = generate_sample(SceneSpec(), SIZE, 11)
    c = generate_sample(SceneSpec(), SIZE, 12)
    assert a.frame1.tobytes() == b.frame1.tobytes() and a.flow.tobytes() == b.flow.tobytes()
    assert a.frame1.tobytes() != c.frame1.tobytes()


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        SceneSpec(num_layers=(0, 2))
    with pytest.raises(ValueError):
        SceneSpec(shapes=("star",))
    spec = SceneSpec(translation=(1.0, 4.0), brightness=0.1)
    assert SceneSpec.from_dict(spec.to_dict()) == spec
    assert spec.fingerprint() != SceneSpec().fingerprint()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_vflip_involution(seed):
    s = generate_sample(SceneSpec(), (16, 24), seed)
    back = vflip(vflip(s))
    for k in ("frame1", "frame2", "flow", "valid"):
        assert np.array_equal(getattr(back, k), getattr(s, k))


def test_vflip_geometry():
    s = generate_sample(SceneSpec(), (16, 24), 3)
    f = vflip(s)
    assert np.array_equal(f.frame1, s.frame1[:, ::-1])
    assert np.array_equal(f.flow[0], s.flow[0][::-1])
    assert np.array_equal(f.flow[1], -s.flow[1][::-1])


def test_vflip_label_consistency():
    s = generate_sample(SceneSpec(), (16, 24), 5)
    pred = s.flow + np.random.default_rng(0).normal(0, 1, s.flow.shape).astype(np.float32)
    flipped = vflip(s)
    fpred = pred[:, ::-1].copy()
    fpred[1] = -fpred[1]
    assert metrics.aepe(fpred, flipped.flow) == pytest.approx(metrics.aepe(pred, s.flow), abs=1e-9)


def test_vflip_frequency():
    s = generate_sample(SceneSpec(), (4, 4), 0)
    policy = AugmentPolicy(vflip_prob=0.1)
    flips = sum(augment(s, policy, stream(seed, "augment", 0)).meta["vflip"] for seed in range(10_000))
    assert 0.08 <= flips / 10_000 <= 0.12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_erase_contract(seed):
    s = generate_sample(SceneSpec(), (16, 24), seed % 1000)
    rng = np.random.default_rng(seed)
    e = erase(s, rng)
    assert e.flow.tobytes() == s.flow.tobytes()
    assert e.frame1.tobytes() == s.frame1.tobytes()
    diff = (e.frame2 != s.frame2).any(axis=0)
    if diff.any():
        ys, xs = np.nonzero(diff)
        # changes stay inside one rectangle of frame2
        box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        assert box <= 0.25 * 16 * 24 + 24


def test_erase_fills_with_mean():
    s = generate_sample(SceneSpec(), (32, 48), 1)
    e = erase(s, np.random.default_rng(3))
    mean = s.frame2.reshape(3, -1).mean(axis=1)
    changed = (e.frame2 != s.frame2).any(axis=0)
    assert changed.any()
    np.testing.assert_allclose(e.frame2[:, changed], np.broadcast_to(mean[:, None], (3, changed.sum())), rtol=1e-6)


def test_augment_policy_rules():
    with pytest.raises(ValueError):
        AugmentPolicy(vflip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy(erase_prob=-0.1)
    assert AugmentPolicy().identity
    assert AugmentPolicy.from_dict({"crop": [8, 8]}).crop == (8, 8)


def test_crop():
    s = generate_sample(SceneSpec(), (16, 24), 0)
    with pytest.raises(ValueError, match="does not fit"):
        crop(s, (17, 24), np.random.default_rng(0))
    c = crop(s, (8, 8), np.random.default_rng(0))
    assert c.frame1.shape == (3, 8, 8) and c.flow.shape == (2, 8, 8)


def test_augment_deterministic_and_input_untouched():
    s = generate_sample(SceneSpec(), (16, 24), 0)
    before = s.frame2.copy()
    policy = AugmentPolicy(vflip_prob=0.5, erase_prob=0.5, crop=(8, 16), brightness=0.1, contrast=0.1)
    a = augment(s, policy, np.random.default_rng(9))
    b = augment(s, policy, np.random.default_rng(9))
    assert a.frame2.tobytes() == b.frame2.tobytes() and a.flow.tobytes() == b.flow.tobytes()
    assert np.array_equal(s.frame2, before)


# ---------------------------------------------------------------------------
# histograms and splits
# ---------------------------------------------------------------------------

def _flat(u, v, shape=(10, 10)):
    flow = np.stack([np.full(shape, u, np.float32), np.full(shape, v, np.float32)])
    return FlowSample(np.zeros((3,) + shape, np.float32), np.zeros((3,) + shape, np.float32), flow, np.ones(shape, bool))


def test_histogram_examples():
    h = motion_histogram([_flat(0, 0)])
    assert h[0] == 100 and h.sum() == 100
    h = motion_histogram([_flat(10, 0)])
    idx = np.searchsorted(MAGNITUDE_EDGES, 10, side="right") - 1
    assert h[idx] == 100 and h.sum() == 100
    # 30 % of pixels at magnitude 1, 70 % at magnitude 20
    samples = [_flat(1, 0)] * 3 + [_flat(0, 20)] * 7
    h = motion_histogram(samples) / 1000
    assert abs(h[0] - 0.3) < 0.01 and abs(h[np.searchsorted(MAGNITUDE_EDGES, 20, side="right") - 1] - 0.7) < 0.01
    with pytest.raises(ValueError):
        motion_histogram([])


def test_histogram_counts_all_pixels():
    samples = [generate_sample(SceneSpec(translation=(0, 40)), (16, 24), s) for s in range(5)]
    assert motion_histogram(samples).sum() == 5 * 16 * 24


def test_overlap_coefficient():
    assert overlap_coefficient([1, 0], [1, 0]) == 1.0
    assert overlap_coefficient([1, 0], [0, 2]) == 0.0
    assert overlap_coefficient([1, 1], [1, 3]) == pytest.approx(0.75)


def test_splits():
    size = (16, 24)
    tr, va = build_splits(IN_DISTRIBUTION, 128, 128, 0, size=size)
    assert overlap_coefficient(motion_histogram(tr), motion_histogram(va)) > 0.9
    tr2, va2 = build_splits(OUT_OF_DISTRIBUTION, 16, 16, 0, size=size)
    assert overlap_coefficient(motion_histogram(tr2), motion_histogram(va2)) < 0.5
    again, _ = build_splits(OUT_OF_DISTRIBUTION, 16, 16, 0, size=size)
    assert all(a.flow.tobytes() == b.flow.tobytes() for a, b in zip(tr2, again))
    seeds_tr = {s.meta["seed"] for s in tr}
    assert not seeds_tr & {s.meta["seed"] for s in va}
    with pytest.raises(ValueError):
        build_splits("sideways", 1, 1, 0)
    with pytest.raises(ValueError):
        build_splits(IN_DISTRIBUTION, 0, 1, 0)


# ---------------------------------------------------------------------------
# mixtures and manifests
# ---------------------------------------------------------------------------

def test_mixture_validation():
    with pytest.raises(ValueError):
        DatasetMixture((), (), ())
    with pytest.raises(ValueError):
        DatasetMixture.of({"sintel": 0.5, "kitti": 0.4})
    with pytest.raises(ValueError):
        DatasetMixture.of({"nowhere": 1.0})
    mix = DatasetMixture.of(FINETUNE_MIX)
    assert DatasetMixture.from_dict(mix.to_dict()) == mix


def test_single_source():
    mix = DatasetMixture.single(SceneSpec(), "only")
    assert {mix.names[mix.choose(3, k)] for k in range(2000)} == {"only"}


def test_two_equal_sources():
    mix = DatasetMixture.of({"a": 0.5, "b": 0.5}, {"a": SceneSpec(), "b": SceneSpec()})
    picks = np.array([mix.choose(1, k) for k in range(100_000)])
    assert abs((picks == 0).mean() - (picks == 1).mean()) < 0.01


def test_mixture_stateless():
    mix = DatasetMixture.of(FINETUNE_MIX)
    stream_ = sample_mixture(mix, 5, (16, 24), start=0)
    drawn = [next(stream_) for _ in range(4)]
    name, s = draw(mix, 5, 3, (16, 24))
    assert drawn[3][1] == name and drawn[3][2].flow.tobytes() == s.flow.tobytes()


def test_manifest_regeneration(tmp_path):
    mix = DatasetMixture.of(FINETUNE_MIX)
    path = tmp_path / "manifest.json"
    write_manifest(path, mix, 7, 6, (16, 24))
    doc = read_manifest(path)
    assert len(doc["rows"]) == 6
    for k in range(6):
        _, s = draw(mix, 7, k, (16, 24))
        r = regenerate(doc, k)
        assert r.frame1.tobytes() == s.frame1.tobytes() and r.flow.tobytes() == s.flow.tobytes()

"""Reverse-mode gradients against central finite differences (64-bit)."""
import numpy as np
import pytest

from flowlab.arch import ModelConfig, ModelState, forward, param_shapes
from flowlab.arch.config import init_params
from flowlab.tensor import Tensor, ops
from flowlab.tensor.gradcheck import check_gradients, relative_error

TOL = 1e-3
INSTANCES = 100


def _weighted(out, rng):
    """Reduce to a scalar with fixed random weights so every output matters."""
    w = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return (out * w).sum()


PRIMITIVES = {
    "add": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((1, 3))], lambda t: ops.add(t[0], t[1])),
    "sub": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))], lambda t: ops.sub(t[0], t[1])),
    "mul": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((3,))], lambda t: ops.mul(t[0], t[1])),
    "relu": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.relu(t[0])),
    "leaky_relu": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.leaky_relu(t[0], 0.1)),
    "tanh": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.tanh(t[0])),
    "sigmoid": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.sigmoid(t[0])),
    "sqrt": (lambda r: [r.uniform(0.5, 2.0, (3, 4))], lambda t: ops.sqrt(t[0])),
    "square": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.square(t[0])),
    "softmax": (lambda r: [r.standard_normal((2, 5))], lambda t: ops.softmax(t[0], axis=1)),
    "reshape_transpose": (lambda r: [r.standard_normal((2, 3, 4))], lambda t: t[0].reshape(6, 4).transpose(1, 0)),
    "getitem": (lambda r: [r.standard_normal((4, 5))], lambda t: t[0][1:3, ::2]),
    "concat": (lambda r: [r.standard_normal((1, 2, 3)), r.standard_normal((1, 1, 3))], lambda t: ops.concat(t, axis=1)),
    "sum_mean": (lambda r: [r.standard_normal((3, 4))], lambda t: ops.concat([t[0].sum(axis=0, keepdims=True), t[0].mean(axis=0, keepdims=True)], axis=0)),
    "conv2d_same": (
        lambda r: [r.standard_normal((1, 2, 5, 6)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
        lambda t: ops.conv2d(t[0], t[1], t[2], padding=1),
    ),
    "conv2d_strided": (
        lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((2, 2, 3, 3)), r.standard_normal(2)],
        lambda t: ops.conv2d(t[0], t[1], t[2], stride=2, padding=1),
    ),
    "conv2d_1x1": (
        lambda r: [r.standard_normal((1, 3, 4, 4)), r.standard_normal((2, 3, 1, 1))],
        lambda t: ops.conv2d(t[0], t[1]),
    ),
    "unfold": (lambda r: [r.standard_normal((1, 2, 4, 5))], lambda t: ops.unfold(t[0], 3, 1)),
    "dense": (
        lambda r: [r.standard_normal((2, 6)), r.standard_normal((6, 3)), r.standard_normal(3)],
        lambda t: ops.dense(t[0], t[1], t[2]),
    ),
    "avg_pool2": (lambda r: [r.standard_normal((1, 2, 4, 6))], lambda t: ops.avg_pool2(t[0])),
    "resize_bilinear": (lambda r: [r.standard_normal((1, 2, 3, 4))], lambda t: ops.resize_bilinear(t[0], (5, 7))),
    "bilinear_sample": (
        lambda r: [r.standard_normal((1, 2, 5, 6)), np.stack([r.uniform(-1.5, 6.5, (3, 4)), r.uniform(-1.5, 5.5, (3, 4))])[None]],
        lambda t: ops.bilinear_sample(t[0], t[1]),
    ),
    "warp": (
        lambda r: [r.standard_normal((1, 2, 5, 6)), r.uniform(-2, 2, (1, 2, 5, 6))],
        lambda t: ops.warp(t[0], t[1]),
    ),
    "local_correlation": (
        lambda r: [r.standard_normal((1, 3, 5, 6)), r.standard_normal((1, 3, 5, 6))],
        lambda t: ops.local_correlation(t[0], t[1], 2),
    ),
    "all_pairs_correlation": (
        lambda r: [r.standard_normal((1, 3, 3, 4)), r.standard_normal((1, 3, 3, 4))],
        lambda t: ops.all_pairs_correlation(t[0], t[1]),
    ),
}


def primitive_error(name, instances=INSTANCES):
    """Worst relative error of one primitive over ``instances`` random inputs."""
    make, fn = PRIMITIVES[name]
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([i, len(name)])
        arrays = make(rng)
        wrng_seed = int(rng.integers(2**31))

        def build(ts, s=wrng_seed):
            return _weighted(fn(ts), np.random.default_rng(s))

        worst = max(worst, check_gradients(build, arrays, rng=rng, max_coords=4))
    return worst


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    worst = primitive_error(name)
    assert worst < TOL, f"{name}: max relative error {worst:.2e}"


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-9, 0.0) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == pytest.approx(0.5)


TINY = {
    "pwc": ModelConfig(arch="pwc", levels=2, widths=(4, 5), search_radius=1, decoder_widths=(6,)),
    "irr": ModelConfig(arch="irr", levels=2, widths=(4, 5), search_radius=1, decoder_widths=(6,), irr_width=4),
    # one refinement step: later steps read the detached flow, which finite
    # differences cannot see through
    "raft": ModelConfig(arch="raft", raft_iters=1, raft_radius=1, raft_corr_levels=2, raft_dim=6,
                        raft_hidden=4, raft_context=4, upsample=2),
}


def end_to_end_error(arch):
    cfg = TINY[arch]
    shapes = param_shapes(cfg)
    names = list(shapes)
    rng = np.random.default_rng(7)
    params = init_params(shapes, seed=3, dtype=np.float64)
    # biases start at zero; perturb them so no ReLU sits exactly on its kink
    arrays = [params[n].data * 0.7 + 0.05 * rng.standard_normal(shapes[n]) for n in names]
    arrays += [rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))]
    wseed = 11

    def build(ts):
        state = ModelState(cfg, dict(zip(names, ts[:-2])))
        pred = forward(state, ts[-2], ts[-1])
        total = _weighted(pred.final, np.random.default_rng(wseed))
        for flow, _ in pred.intermediates:
            total = total + _weighted(flow, np.random.default_rng(wseed + 1))
        return total

    return check_gradients(build, arrays, rng=rng, max_coords=3)


@pytest.mark.parametrize("arch", sorted(TINY))
def test_end_to_end_gradients(arch):
    worst = end_to_end_error(arch)
    assert worst < TOL, f"{arch}: max relative error {worst:.2e}"

"""Numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py --repeats 5 --size 64x96

Both versions are called directly, so ``FLOWLAB_DISABLE_NUMBA`` does not
matter here.  Each row reports the best-of-``repeats`` wall time after one
warm-up call (which also triggers compilation) and the max abs difference
between the two outputs.
"""
import argparse
import timeit

import numpy as np

from flowlab import kernels


def _cases(N, C, H, W, radius, rng):
    src = rng.standard_normal((N, C, H, W), dtype=np.float32)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float32)
    coords = np.stack([xs, ys])[None].repeat(N, 0) + rng.uniform(-3, 3, (N, 2, H, W)).astype(np.float32)
    f2 = rng.standard_normal((N, C, H, W), dtype=np.float32)
    K = (2 * radius + 1) ** 2
    g_bil = rng.standard_normal((N, C, H, W), dtype=np.float32)
    g_corr = rng.standard_normal((N, K, H, W), dtype=np.float32)
    return {
        "bilinear_forward": ((src, coords), kernels.np_bilinear_forward, kernels.nb_bilinear_forward),
        "bilinear_backward": ((g_bil, src, coords), kernels.np_bilinear_backward, kernels.nb_bilinear_backward),
        "corr_forward": ((src, f2, radius), kernels.np_corr_forward, kernels.nb_corr_forward),
        "corr_backward": ((g_corr, src, f2, radius), kernels.np_corr_backward, kernels.nb_corr_backward),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.asarray(p, np.float64).ravel() for p in parts])


def _best(fn, args, repeats):
    fn(*args)  # warm-up / compile
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeats))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", default="64x96", help="feature map HxW")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--radius", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    H, W = (int(v) for v in args.size.lower().split("x"))
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max diff':>10}")
    for name, (inputs, np_fn, nb_fn) in _cases(1, args.channels, H, W, args.radius, rng).items():
        t_np = _best(np_fn, inputs, args.repeats)
        t_nb = _best(nb_fn, inputs, args.repeats)
        diff = float(np.abs(_flat(np_fn(*inputs)) - _flat(nb_fn(*inputs))).max())
        print(f"{name:<18} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x {diff:>10.1e}")


if __name__ == "__main__":
    main()

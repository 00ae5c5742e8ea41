"""Central finite-difference gradient checking."""
import numpy as np

from .core import Tensor, backward, precision, reset_graph


def numeric_grad(fn, arrays, index, coord, step=1e-5):
    """d fn / d arrays[index][coord] by central differences (fn returns a float)."""
    arr = arrays[index]
    orig = arr[coord]
    arr[coord] = orig + step
    fp = fn(arrays)
    arr[coord] = orig - step
    fm = fn(arrays)
    arr[coord] = orig
    return (fp - fm) / (2 * step)


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(build, arrays, rng=None, max_coords=None, step=1e-5, floor=1e-6):
    """Compare reverse-mode gradients of ``build`` against central differences.

    ``build(tensors) -> scalar Tensor`` is evaluated in 64-bit precision.
    ``arrays`` are float64 numpy inputs (all differentiated).  When
    ``max_coords`` is given, that many coordinates per input are probed at
    random; otherwise every coordinate is.  Returns the max relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(arrs):
        with precision(np.float64):
            reset_graph()
            ts = [Tensor(a.copy(), dtype=np.float64) for a in arrs]
            out = float(build(ts).data)
            reset_graph()
            return out

    with precision(np.float64):
        reset_graph()
        ts = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
        loss = build(ts)
        grads = backward(loss, params=ts)
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for i, a in enumerate(arrays):
        coords = list(np.ndindex(a.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[k] for k in pick]
        g = grads[ts[i]]
        for c in coords:
            num = numeric_grad(value, arrays, i, c, step)
            worst = max(worst, relative_error(float(g[c]), num, floor))
    return worst

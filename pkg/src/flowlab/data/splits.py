"""Motion histograms and train/validation split construction."""
from __future__ import annotations

import numpy as np

from ..seeding import stream
from .generator import SceneSpec, generate_sample

# open-ended last bin so every pixel lands somewhere
MAGNITUDE_EDGES = (0.0, 2.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, np.inf)

IN_DISTRIBUTION = "in-distribution"
OUT_OF_DISTRIBUTION = "out-of-distribution"

# training motion: small; shifted validation motion: middle to large
SMALL_MOTION = SceneSpec(translation=(0.0, 6.0))
LARGE_MOTION = SceneSpec(translation=(10.0, 22.0))


def motion_histogram(samples, edges=MAGNITUDE_EDGES) -> np.ndarray:
    """Counts of valid pixels per flow-magnitude bin ``[lo, hi)``."""
    samples = list(samples)
    if not samples:
        raise ValueError("motion_histogram needs at least one sample")
    edges = np.asarray(edges, np.float64)
    counts = np.zeros(len(edges) - 1, np.int64)
    for s in samples:
        mag = np.hypot(s.flow[0].astype(np.float64), s.flow[1].astype(np.float64))[s.valid]
        idx = np.searchsorted(edges, mag, side="right") - 1
        idx = idx[(idx >= 0) & (idx < len(counts))]
        counts += np.bincount(idx, minlength=len(counts))
    return counts


def overlap_coefficient(h1, h2) -> float:
    """Shared mass of two histograms after normalisation to unit sum."""
    p = np.asarray(h1, np.float64)
    q = np.asarray(h2, np.float64)
    return float(np.minimum(p / p.sum(), q / q.sum()).sum())


def _draw(spec, n, seed, role, size):
    seeds = stream(seed, "split", role).integers(0, 2**62, size=n)
    return [generate_sample(spec, size, int(s)) for s in seeds]


def build_splits(mode, n_train, n_val, seed, size=(64, 96), train_spec=SMALL_MOTION, shifted_spec=LARGE_MOTION):
    """Return ``(train, val)`` sample lists.

    In-distribution draws both sets from ``train_spec``; out-of-distribution
    draws validation from ``shifted_spec``.  Train and validation use
    independent seed streams, so no sample is shared.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    if mode == IN_DISTRIBUTION:
        val_spec = train_spec
    elif mode == OUT_OF_DISTRIBUTION:
        val_spec = shifted_spec
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return _draw(train_spec, n_train, seed, "train", size), _draw(val_spec, n_val, seed, "val", size)

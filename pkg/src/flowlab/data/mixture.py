"""Weighted interleaving of several synthetic sources, plus the manifest format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ..seeding import stream
from .generator import SceneSpec, generate_sample

# Five generator configurations standing in for the usual training sources.
# Each has its own motion and texture statistics.
SOURCES = {
    "sintel": SceneSpec(num_layers=(3, 4), translation=(0.0, 10.0), texture_freq=0.06),
    "kitti": SceneSpec(num_layers=(2, 3), translation=(2.0, 14.0), max_rotation=0.01, texture_freq=0.04),
    "viper": SceneSpec(num_layers=(3, 4), translation=(0.0, 12.0), texture_freq=0.05, brightness=0.05),
    "hd1k": SceneSpec(num_layers=(2, 2), translation=(0.0, 6.0), texture_freq=0.05, contrast=0.1),
    "things": SceneSpec(num_layers=(4, 4), translation=(4.0, 18.0), shapes=("polygon",), texture_freq=0.06),
}

FINETUNE_MIX = {"sintel": 0.4, "kitti": 0.2, "viper": 0.2, "hd1k": 0.08, "things": 0.12}


@dataclass(frozen=True)
class DatasetMixture:
    names: tuple
    probs: tuple
    specs: tuple

    def __post_init__(self):
        if not self.names:
            raise ValueError("mixture needs at least one source")
        if len(self.names) != len(self.probs) or len(self.names) != len(self.specs):
            raise ValueError("names, probabilities and specs must align")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate source names")
        p = np.asarray(self.probs, np.float64)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities must be non-negative and sum to 1, got {list(p)}")

    @classmethod
    def of(cls, weights: dict, specs: dict | None = None):
        specs = SOURCES if specs is None else specs
        missing = [n for n in weights if n not in specs]
        if missing:
            raise ValueError(f"unknown sources {missing}")
        names = tuple(weights)
        return cls(names, tuple(float(weights[n]) for n in names), tuple(specs[n] for n in names))

    @classmethod
    def single(cls, spec: SceneSpec, name="synthetic"):
        return cls((name,), (1.0,), (spec,))

    def to_dict(self):
        return {n: {"prob": p, "spec": s.to_dict()} for n, p, s in zip(self.names, self.probs, self.specs)}

    @classmethod
    def from_dict(cls, d):
        names = tuple(d)
        return cls(names, tuple(float(d[n]["prob"]) for n in names), tuple(SceneSpec.from_dict(d[n]["spec"]) for n in names))

    def choose(self, seed, k) -> int:
        """Source index of draw ``k``; depends only on ``(seed, k)``."""
        u = stream(seed, "mixture", k).random()
        cdf = np.cumsum(self.probs)
        return min(int(np.searchsorted(cdf, u, side="right")), len(self.names) - 1)

    def sample_seed(self, seed, k) -> int:
        return int(stream(seed, "data", k).integers(0, 2**62))


def draw(mixture: DatasetMixture, seed, k, size):
    """The ``k``-th sample of the stream: ``(source name, sample)``."""
    i = mixture.choose(seed, k)
    return mixture.names[i], generate_sample(mixture.specs[i], size, mixture.sample_seed(seed, k))


def sample_mixture(mixture: DatasetMixture, seed, size, start=0):
    """Endless stream of ``(k, source, sample)``."""
    k = start
    while True:
        name, sample = draw(mixture, seed, k, size)
        yield k, name, sample
        k += 1


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def manifest_rows(mixture: DatasetMixture, seed, count, size):
    rows = []
    for k in range(count):
        i = mixture.choose(seed, k)
        spec = mixture.specs[i]
        rows.append({
            "index": k,
            "source": mixture.names[i],
            "seed": mixture.sample_seed(seed, k),
            "spec": spec.fingerprint(),
            "size": [int(size[0]), int(size[1])],
        })
    return rows


def write_manifest(path, mixture: DatasetMixture, seed, count, size):
    doc = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "specs": {s.fingerprint(): s.to_dict() for s in mixture.specs},
        "rows": manifest_rows(mixture, seed, count, size),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)
    return doc


def read_manifest(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')}")
    return doc


def regenerate(doc, index):
    """Rebuild one manifest row's sample from the manifest alone."""
    row = doc["rows"][index]
    spec = SceneSpec.from_dict(doc["specs"][row["spec"]])
    return generate_sample(spec, tuple(row["size"]), row["seed"])

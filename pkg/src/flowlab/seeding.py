"""Named random sub-streams derived from a single experiment seed."""
import zlib

import numpy as np

STREAMS = ("data", "init", "augment", "mixture", "split", "train")


def _key(k):
    return zlib.crc32(k.encode()) if isinstance(k, str) else int(k)


def stream(seed: int, name: str, *keys) -> np.random.Generator:
    """Generator for sub-stream ``name``; extra ``keys`` index within it (e.g. sample k)."""
    return np.random.default_rng([int(seed), _key(name), *(_key(k) for k in keys)])

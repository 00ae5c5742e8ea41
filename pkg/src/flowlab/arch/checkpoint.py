"""Checkpoint container: named parameter arrays plus a JSON header.

Layout is a plain ``.npz`` archive.  ``__meta__`` holds a UTF-8 JSON header
with the format version, model config, config fingerprint and parameter
names/shapes; every other member is one array.  Arrays are stored raw, so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import io
import json

import numpy as np

from ..tensor import Tensor
from .config import ModelConfig, ModelState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state: ModelState, extra_arrays=None, extra_meta=None) -> bytes:
    meta = {
        "format_version": FORMAT_VERSION,
        "arch": state.arch,
        "config": state.config.to_dict(),
        "fingerprint": state.config.fingerprint(),
        "params": {k: list(p.shape) for k, p in state.params.items()},
        "extra": extra_meta or {},
    }
    arrays = {f"param/{k}": p.data for k, p in state.params.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    return buf.getvalue()


def loads(blob: bytes, expect_fingerprint=None):
    """Returns ``(state, extra_arrays, extra_meta)``."""
    with np.load(io.BytesIO(blob), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise CheckpointError("not a flowlab checkpoint: missing header")
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
        cfg = ModelConfig.from_dict({k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
        if cfg.fingerprint() != meta["fingerprint"]:
            raise CheckpointError("checkpoint config does not match its fingerprint")
        if expect_fingerprint is not None and meta["fingerprint"] != expect_fingerprint:
            raise CheckpointError(
                f"config fingerprint mismatch: checkpoint {meta['fingerprint']}, expected {expect_fingerprint}"
            )
        params = {}
        for name, shape in meta["params"].items():
            arr = z[f"param/{name}"]
            if list(arr.shape) != shape:
                raise CheckpointError(f"parameter {name}: shape {arr.shape} != header {shape}")
            params[name] = Tensor(arr, requires_grad=True, name=name)
        extra = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
    return ModelState(cfg, params), extra, meta["extra"]


def save(path, state, extra_arrays=None, extra_meta=None):
    blob = dumps(state, extra_arrays, extra_meta)
    with open(path, "wb") as f:
        f.write(blob)


def load(path, expect_fingerprint=None):
    with open(path, "rb") as f:
        return loads(f.read(), expect_fingerprint)

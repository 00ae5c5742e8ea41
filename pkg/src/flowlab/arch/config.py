"""Model configuration, parameter state and prediction containers."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..seeding import stream
from ..tensor import Tensor

ARCHS = ("pwc", "irr", "raft")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "pwc"
    # pyramid models (pwc / irr)
    levels: int = 4
    widths: tuple = (16, 32, 32, 32)
    search_radius: int = 4
    decoder_widths: tuple = (48, 32)
    irr_width: int = 32
    # raft
    raft_iters: int = 8
    raft_radius: int = 3
    raft_corr_levels: int = 3
    raft_dim: int = 48
    raft_hidden: int = 32
    raft_context: int = 32
    upsample: int = 4

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if len(self.widths) != self.levels:
            raise ValueError(f"need {self.levels} pyramid widths, got {len(self.widths)}")
        if self.search_radius < 0 or self.raft_radius < 0:
            raise ValueError("search radii must be >= 0")
        if self.raft_iters < 1:
            raise ValueError("raft_iters must be >= 1")
        if self.raft_corr_levels < 1:
            raise ValueError("raft_corr_levels must be >= 1")
        if self.upsample < 1 or self.upsample & (self.upsample - 1):
            raise ValueError("upsample factor must be a power of two")
        sizes = (*self.widths, *self.decoder_widths, self.irr_width, self.raft_dim,
                 self.raft_hidden, self.raft_context)
        if min(sizes) <= 0:
            raise ValueError("all widths must be positive")

    @property
    def divisor(self) -> int:
        """Input H and W must be multiples of this."""
        if self.arch == "raft":
            return self.upsample * 2 ** (self.raft_corr_levels - 1)
        return 2**self.levels

    def check_input(self, H, W):
        d = self.divisor
        if H % d or W % d:
            raise ValueError(f"{self.arch} input {H}x{W} must be divisible by {d}")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def arch(self):
        return self.config.arch

    @property
    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def parameters(self):
        return list(self.params.values())

    def arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def copy(self):
        return ModelState(self.config, {k: Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()})

    def astype(self, dtype):
        return ModelState(self.config, {k: Tensor(p.data.astype(dtype), requires_grad=True) for k, p in self.params.items()})

    def __getitem__(self, name):
        return self.params[name]


@dataclass
class FlowPrediction:
    """``final`` is ``[N,2,H,W]``; ``intermediates`` are ``(flow, scale)`` pairs
    where ``scale`` is input resolution / native resolution."""

    final: Tensor
    intermediates: list

    def flows(self):
        return [f for f, _ in self.intermediates]


def init_params(shapes: dict, seed: int, dtype=np.float32) -> dict:
    """He-uniform weights, zero biases; parameters drawn in declaration order."""
    rng = stream(seed, "init")
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params

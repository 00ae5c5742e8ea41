"""The three flow architectures behind one interface."""
import numpy as np

from . import checkpoint
from .config import ARCHS, FlowPrediction, ModelConfig, ModelState, init_params
from .pwc import forward_irr, forward_pwc, irr_shapes, pwc_shapes
from .raft import forward_raft, raft_shapes

_SHAPES = {"pwc": pwc_shapes, "irr": irr_shapes, "raft": raft_shapes}
_FORWARD = {"pwc": forward_pwc, "irr": forward_irr, "raft": forward_raft}


def param_shapes(config: ModelConfig) -> dict:
    return _SHAPES[config.arch](config)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    return ModelState(config, init_params(param_shapes(config), seed, dtype))


def forward(state: ModelState, frame1, frame2) -> FlowPrediction:
    return _FORWARD[state.arch](state, frame1, frame2)


__all__ = [
    "ARCHS",
    "FlowPrediction",
    "ModelConfig",
    "ModelState",
    "build_model",
    "checkpoint",
    "forward",
    "forward_irr",
    "forward_pwc",
    "forward_raft",
    "param_shapes",
]

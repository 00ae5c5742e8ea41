"""Minimal dense tensors with reverse-mode differentiation."""
from . import ops
from .core import (
    AllocationRegistry,
    Graph,
    Tensor,
    alloc_tag,
    as_tensor,
    backward,
    current_graph,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    reset_graph,
    track_allocations,
)
from .ops import (
    BudgetExceeded,
    add,
    all_pairs_correlation,
    avg_pool2,
    bilinear_sample,
    concat,
    conv2d,
    dense,
    leaky_relu,
    local_correlation,
    mul,
    pixel_grid,
    relu,
    resize_bilinear,
    sigmoid,
    softmax,
    sqrt,
    square,
    sub,
    tanh,
    unfold,
    upsample2,
    warp,
)

__all__ = [name for name in dir() if not name.startswith("_")]

"""Tensor, define-by-run graph and reverse-mode backward pass."""
from __future__ import annotations

import contextlib
import threading
import weakref

import numpy as np

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (``np.float64`` for gradient checks)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


# ---------------------------------------------------------------------------
# allocation accounting (consumed by flowlab.profiler)
# ---------------------------------------------------------------------------

class AllocationRegistry:
    """Records every tensor buffer allocated while active.

    Views produced by reshape/transpose/detach share memory and are free.  Allocations can carry a tag
    (see :func:`alloc_tag`), which is how cost volumes are isolated.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0
        self.events: list[tuple[str | None, tuple, int]] = []
        self.tag_peak: dict[str, int] = {}
        self.tag_live: dict[str, int] = {}
        self.tag_largest: dict[str, int] = {}
        self.tag_elements: dict[str, list[int]] = {}

    def allocate(self, tensor, nbytes, tag):
        self.live += nbytes
        self.total += nbytes
        self.peak = max(self.peak, self.live)
        self.events.append((tag, tensor.shape, nbytes))
        if tag is not None:
            self.tag_live[tag] = self.tag_live.get(tag, 0) + nbytes
            self.tag_peak[tag] = max(self.tag_peak.get(tag, 0), self.tag_live[tag])
            self.tag_largest[tag] = max(self.tag_largest.get(tag, 0), nbytes)
            self.tag_elements.setdefault(tag, []).append(int(tensor.data.size))
        weakref.finalize(tensor, self._release, nbytes, tag)

    def _release(self, nbytes, tag):
        self.live -= nbytes
        if tag is not None:
            self.tag_live[tag] -= nbytes


_registry_lock = threading.Lock()


@contextlib.contextmanager
def track_allocations():
    """Activate a fresh :class:`AllocationRegistry` for this thread.

    Measured runs are strictly single-stream: a second concurrent measured
    run raises instead of interleaving its allocations.
    """
    if not _registry_lock.acquire(blocking=False):
        raise RuntimeError("another measured run is already tracking allocations")
    reg = AllocationRegistry()
    _state.registry = reg
    try:
        yield reg
    finally:
        _state.registry = None
        _registry_lock.release()


@contextlib.contextmanager
def alloc_tag(tag):
    prev = getattr(_state, "tag", None)
    _state.tag = tag
    try:
        yield
    finally:
        _state.tag = prev


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Graph:
    """Append-only list of ``(backward_fn, inputs, output)`` nodes."""

    def __init__(self):
        self.nodes = []

    def record(self, out, inputs, backward_fn):
        out._node = len(self.nodes)
        out._graph = self
        self.nodes.append((backward_fn, inputs, out))


def current_graph() -> Graph:
    g = getattr(_state, "graph", None)
    if g is None:
        g = _state.graph = Graph()
    return g


def reset_graph():
    """Drop the active graph (and everything it keeps alive)."""
    _state.graph = Graph()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_graph", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _view=False):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype.kind != "f":
                arr = arr.astype(default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None
        self._graph = None
        reg = getattr(_state, "registry", None)
        if reg is not None and not _view:
            reg.allocate(self, arr.nbytes, getattr(_state, "tag", None))

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self):
        return self._node

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, _view=True)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in ops) -------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def make_result(data, inputs, backward_fn, view=False) -> Tensor:
    """Wrap an op result and, if any input needs a gradient, record the node.

    ``view=True`` marks results that alias an input buffer (no new memory).
    """
    req = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req, _view=view)
    if req:
        current_graph().record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, params=None):
    """Reverse-mode sweep from a scalar ``loss``.

    Visits the recorded nodes in reverse append order, exactly once each.
    Leaves reached by the sweep get their ``.grad`` set; tensors listed in
    ``params`` that the loss does not depend on get a zero-filled ``.grad``.
    Returns ``{tensor: gradient array}`` for all leaves and ``params``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._graph is None:
        raise ValueError("loss is not attached to a differentiation graph")
    graph = loss._graph
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for backward_fn, inputs, out in reversed(graph.nodes[: loss._node + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                leaves[id(t)] = t
            k = id(t)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = gi
    result = {}
    for k, t in leaves.items():
        t.grad = np.asarray(grads[k], dtype=t.dtype).reshape(t.shape)
        result[t] = t.grad
    for p in params or ():
        if p not in result:
            p.grad = np.zeros_like(p.data)
            result[p] = p.grad
    if graph is getattr(_state, "graph", None):
        reset_graph()
    return result

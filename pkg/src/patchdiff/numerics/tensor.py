"""Array container with a reverse-mode tape and allocation accounting.

Storage is float32 by default. Gradient checks build float64 tensors
explicitly; ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _active_counter() -> Optional["AllocCounter"]:
    stack = getattr(_state, "counters", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording; intermediate tensors are freed as soon as unreferenced."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass
class AllocCounter:
    """Live/peak byte counter for Tensor storage.

    ``events`` records ``(delta_bytes, live_after)`` pairs and ``markers``
    records ``(label, event_position)`` so that callers can inspect the
    allocation trajectory between two points.
    """

    current_bytes: int = 0
    peak_bytes: int = 0
    record_events: bool = True
    events: list = field(default_factory=list)
    markers: list = field(default_factory=list)

    def alloc(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        if self.record_events:
            self.events.append((nbytes, self.current_bytes))

    def free(self, nbytes: int) -> None:
        self.current_bytes -= nbytes
        if self.record_events:
            self.events.append((-nbytes, self.current_bytes))

    def mark(self, label: str) -> None:
        self.markers.append((label, len(self.events)))

    def live_between(self, start: str, stop: str) -> list[int]:
        pos = dict(self.markers)
        return [live for _, live in self.events[pos[start]:pos[stop]]]


@contextlib.contextmanager
def track_allocations(record_events: bool = True) -> Iterator[AllocCounter]:
    """Route every Tensor allocation made inside the block through a fresh counter."""
    counter = AllocCounter(record_events=record_events)
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def scoped_peak(measure: Callable[[], object], record_events: bool = True) -> AllocCounter:
    """Run ``measure()`` under a fresh counter and return it (``peak_bytes`` is the answer)."""
    with track_allocations(record_events) as counter:
        result = measure()
        del result
    return counter


class Tensor:
    """N-d array with optional gradient and a link to the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_op",
                 "_counter", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _view: bool = False):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""
        counter = None if _view else _active_counter()
        self._counter = counter
        self._nbytes = self.data.nbytes
        if counter is not None:
            counter.alloc(self._nbytes)

    def __del__(self):
        counter = self._counter
        if counter is not None:
            counter.free(self._nbytes)
            self._counter = None

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str,
              view: bool = False) -> "Tensor":
        out = cls(data, dtype=data.dtype, _view=view)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._prev = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------
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

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    # -- reverse pass ------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: Optional[np.ndarray] = None, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss`` that requires it.

    Nodes are visited once each in reverse topological order. Intermediate
    gradients are dropped as soon as they have been propagated.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError("backward() without an explicit grad needs a scalar loss")
        grad = np.ones_like(loss.data)
    order = _topo_order(loss)
    loss._accumulate(grad)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        if not retain_graph:
            # interior nodes keep no gradient; leaves keep theirs
            node.grad = None
            node._prev = ()
            node._backward = None


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]

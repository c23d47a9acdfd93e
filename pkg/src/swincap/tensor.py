"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op in :mod:`swincap.ops` builds a :class:`Tensor` whose
``_backward`` closure maps the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded graph once in reverse topological
order and then releases it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float array that can take part in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- array-like surface ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; the implementations live in ops to keep one source of truth
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    # -- reverse mode ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad.

        The graph is freed afterwards; a second call on the same loss raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward() already ran on this graph; rebuild the loss first")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True
        self._consumed = True


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class MacCounter:
    """Integer multiply-accumulate accumulator with optional named scopes.

    Ops call :meth:`add` unconditionally; nothing is recorded unless the
    counter is enabled. Each addition is also credited to the innermost
    active scope so per-module totals can be read back from ``by_scope``.
    """

    def __init__(self):
        self.total_macs = 0
        self.enabled = False
        self.count_elementwise = False
        self.by_scope: dict[str, int] = {}
        self._scopes: list[str] = []
        self._lock = threading.Lock()

    def reset(self) -> None:
        with self._lock:
            self.total_macs = 0
            self.by_scope = {}

    def add(self, macs: int) -> None:
        if not self.enabled:
            return
        macs = int(macs)
        with self._lock:
            self.total_macs += macs
            if self._scopes:
                key = self._scopes[-1]
                self.by_scope[key] = self.by_scope.get(key, 0) + macs

    def add_elementwise(self, ops: int) -> None:
        """LayerNorm/softmax/GELU element counts, recorded only when opted in."""
        if self.count_elementwise:
            self.add(ops)

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        if not self.enabled:
            yield
            return
        full = f"{self._scopes[-1]}.{name}" if self._scopes else name
        self._scopes.append(full)
        try:
            yield
        finally:
            self._scopes.pop()


MAC_COUNTER = MacCounter()


@contextlib.contextmanager
def count_macs(reset: bool = True, elementwise: bool = False) -> Iterator[MacCounter]:
    """Enable the global MAC counter for the duration of the block."""
    if reset:
        MAC_COUNTER.reset()
    prev = MAC_COUNTER.enabled, MAC_COUNTER.count_elementwise
    MAC_COUNTER.enabled = True
    MAC_COUNTER.count_elementwise = elementwise
    try:
        yield MAC_COUNTER
    finally:
        MAC_COUNTER.enabled, MAC_COUNTER.count_elementwise = prev


def mac_scope(name: str):
    return MAC_COUNTER.scope(name)

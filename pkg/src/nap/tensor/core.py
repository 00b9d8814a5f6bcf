"""Dense f64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous float64 ndarray (i.e. a flat row-major
buffer plus a shape) and optionally participates in a computation graph.
Operations in :mod:`nap.tensor.ops` build the graph; ``backward`` on a
scalar result populates ``grad`` on every reachable leaf tensor that has
``requires_grad`` set.

Gradient accumulation policy: calling ``backward`` while any reachable
leaf still holds a gradient from an earlier pass raises
``GradientStateError``. Callers zero gradients (``zero_grad``) between
passes; silent accumulation is deliberately not supported.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from nap.errors import GradientStateError, ShapeError

__all__ = ["Tensor", "no_grad", "grad_enabled", "as_tensor"]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_f64(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:  # 0-d arrays are contiguous; keep their shape
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """N-dimensional float64 array with optional gradient tracking.

    ``data`` is always C-contiguous float64, so ``data.ravel()`` is the
    row-major flat buffer and ``prod(shape) == data.size`` holds by
    construction. ``grad``, when populated, has the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- graph construction ------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    # -- basic introspection -----------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # -- gradients -----------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar tensor.

        Populates ``grad`` on every reachable leaf with ``requires_grad``.
        Intermediate gradients are not retained.
        """
        if self.data.size != 1:
            raise GradientStateError(
                f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GradientStateError("backward on a tensor with no tracked inputs")
        if self.is_leaf:
            raise GradientStateError("backward on a leaf tensor: no graph to traverse")

        order = self._topo_order()
        leaves = [t for t in order if t.is_leaf and t.requires_grad]
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            names = ", ".join(t.name or "<unnamed>" for t in stale[:5])
            raise GradientStateError(
                f"gradients already present on {len(stale)} leaf tensor(s) ({names}); "
                "call zero_grad before another backward pass")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeError(
                        f"internal gradient shape {pg.shape} != parent shape {parent.data.shape}")
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    def _topo_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        from nap.tensor import ops
        return ops.add(self, as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        from nap.tensor import ops
        return ops.mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __sub__(self, other):
        from nap.tensor import ops
        return ops.add(self, ops.scale(as_tensor(other), -1.0))

    def __neg__(self):
        from nap.tensor import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from nap.tensor import ops
        return ops.matmul(self, as_tensor(other))

    def reshape(self, *shape):
        from nap.tensor import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from nap.tensor import ops
        return ops.sum_all(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def collect_leaves(root: Tensor) -> Iterable[Tensor]:
    """All requires_grad leaves reachable from ``root``."""
    return [t for t in root._topo_order() if t.is_leaf and t.requires_grad]

"""Dense tensors with a reverse-mode autodiff graph.

A Tensor wraps a numpy array (float32 or float64). Ops in crossrot.autodiff.ops
record a backward closure on their result; backward(loss) walks the graph in
reverse topological order and accumulates d(loss)/d(leaf) into each leaf's
.grad buffer. Repeated backward calls accumulate (call zero_grad between
steps). Gradients are only materialized on leaves (parameters and inputs),
never on intermediate results.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform; the message names both shapes."""


class NotScalar(ValueError):
    """backward() requires a scalar (size-1) loss tensor."""


class GraphCycle(RuntimeError):
    """Defensive: the recorded graph contains a cycle."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        """Result tensor recorded on the graph (internal to ops)."""
        out = Tensor(data)
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        return out

    # -- basic views -----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order over the recorded graph, cycle-checked."""
    UNSEEN, ON_STACK, DONE = 0, 1, 2
    state: dict[int, int] = {}
    order: list[Tensor] = []
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, pi = stack.pop()
        nid = id(node)
        if pi == 0:
            s = state.get(nid, UNSEEN)
            if s == DONE:
                continue
            if s == ON_STACK:
                raise GraphCycle("autodiff graph contains a cycle")
            state[nid] = ON_STACK
        parents = node._parents
        if pi < len(parents):
            stack.append((node, pi + 1))
            child = parents[pi]
            if child.requires_grad and state.get(id(child), UNSEEN) != DONE:
                if state.get(id(child)) == ON_STACK:
                    raise GraphCycle("autodiff graph contains a cycle")
                stack.append((child, 0))
        else:
            state[nid] = DONE
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    The per-pass adjoints live in a scratch table, so calling backward twice
    adds the same gradient twice (exact accumulation semantics).
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            held = adjoint.get(pid)
            adjoint[pid] = pg if held is None else held + pg

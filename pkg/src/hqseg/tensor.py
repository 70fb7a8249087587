"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the classical network is a Tensor. Ops record a
tape node (parents + a vector-Jacobian closure); ``backward()`` walks the tape
in reverse topological order and accumulates gradients into every tensor that
``requires_grad``. Gradients accumulate across backward calls until cleared,
so parameters shared between subgraphs sum their contributions naturally.

Elementwise ops broadcast only over leading batch dimensions: the smaller
operand's shape must equal a trailing suffix of the larger one's. General
numpy broadcasting is deliberately rejected.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
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
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is either
    None or an ndarray of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op: str = "leaf"

    # -- introspection -------------------------------------------------

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
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------

    def _attach(self, op: str, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        """Record the tape node on self if grad mode is on and any parent needs it."""
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = parents
            self._vjp = vjp
            self._op = op
        return self

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into every requires_grad ancestor.

        ``self`` must hold exactly one element. Grads add onto whatever is
        already stored; call ``zero_grad`` between optimizer steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")

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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._vjp is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None:
                    continue
                acc = adjoint.get(id(parent))
                # out-of-place: identity vjps may hand the same array to two
                # parents, so stored adjoints must never be mutated
                adjoint[id(parent)] = contrib if acc is None else acc + contrib

    # -- elementwise arithmetic -----------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor(self.data + float(other))
            return out._attach("add_scalar", (self,), lambda g: (g,))
        other = _as_tensor(other)
        a, b, unbroadcast_b, unbroadcast_a = _align(self, other, "add")
        out = Tensor(a + b)
        return out._attach(
            "add", (self, other), lambda g: (unbroadcast_a(g), unbroadcast_b(g))
        )

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            s = float(other)
            out = Tensor(self.data * s)
            return out._attach("mul_scalar", (self,), lambda g: (g * s,))
        other = _as_tensor(other)
        a, b, unbroadcast_b, unbroadcast_a = _align(self, other, "mul")
        out = Tensor(a * b)
        return out._attach(
            "mul",
            (self, other),
            lambda g: (unbroadcast_a(g * b), unbroadcast_b(g * a)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        out = Tensor(-self.data)
        return out._attach("neg", (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __matmul__(self, other):
        return self.matmul(other)

    def matmul(self, other: "Tensor") -> "Tensor":
        """2-D matrix product; inner extents must agree."""
        other = _as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got shapes {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise ValueError(
                f"matmul inner extents differ: {self.shape} vs {other.shape}"
            )
        a, b = self.data, other.data
        out = Tensor(a @ b)
        return out._attach(
            "matmul", (self, other), lambda g: (g @ b.T, a.T @ g)
        )

    # -- reductions and reshapes ----------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum())
        shape = self.data.shape
        return out._attach("sum", (self,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self) -> "Tensor":
        n = self.data.size
        out = Tensor(self.data.mean())
        shape = self.data.shape
        return out._attach(
            "mean", (self,), lambda g: (np.broadcast_to(g / n, shape).copy(),)
        )

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = Tensor(self.data.reshape(shape))
        return out._attach("reshape", (self,), lambda g: (g.reshape(old),))

    # -- activations -----------------------------------------------------

    def relu(self) -> "Tensor":
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0))
        return out._attach("relu", (self,), lambda g: (g * mask,))

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        out = Tensor(t)
        return out._attach("tanh", (self,), lambda g: (g * (1.0 - t * t),))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _align(a: Tensor, b: Tensor, op: str):
    """Leading-batch broadcast check.

    Returns (a_data, b_data, reduce_for_b, reduce_for_a) where the reduce
    callbacks map an output-shaped gradient back onto each operand's shape.
    """
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        ident = lambda g: g
        return a.data, b.data, ident, ident
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        lead = tuple(range(len(sa) - len(sb)))
        return a.data, b.data, (lambda g: g.sum(axis=lead)), (lambda g: g)
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        lead = tuple(range(len(sb) - len(sa)))
        return a.data, b.data, (lambda g: g), (lambda g: g.sum(axis=lead))
    raise ValueError(
        f"{op}: shapes {sa} and {sb} are not conformable "
        "(only leading-batch broadcasting is supported)"
    )


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Convenience constructor for a trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

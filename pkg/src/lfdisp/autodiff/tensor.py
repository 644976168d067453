"""Tensor container and reverse-mode gradient bookkeeping."""
from __future__ import annotations

import contextlib
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

_GRAD_ENABLED = True

FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense real array with an optional gradient buffer.

    Activations are laid out as (batch, channels, height, width); parameters
    and scalar losses use whatever rank they need. Only 32- and 64-bit
    floats are accepted.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in FLOAT_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise TypeError(f"unsupported tensor dtype {dtype}; use float32 or float64")
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Arithmetic used to assemble losses; layer math lives in ops.
    def __add__(self, other):
        from .ops import add

        return add(self, other if isinstance(other, Tensor) else _const_like(self, other))

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import scale

        if isinstance(other, Tensor):
            raise TypeError("tensor-by-tensor products are not supported; use ops")
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from .ops import total

        return total(self)


def _const_like(ref: Tensor, value) -> Tensor:
    return Tensor(np.full(ref.shape, value, dtype=ref.dtype))


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap an op's output, recording the node only when a parent needs gradients."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.op = op
    return out


class Graph:
    """Registry of named trainable tensors plus the op trace of a forward pass.

    Parameters are addressed by name. The node trace is recovered from the
    output tensor on demand, so forward code never has to thread a graph
    object through every op.
    """

    def __init__(self):
        self.parameters: Dict[str, Tensor] = {}

    def add_parameter(self, name: str, value: np.ndarray, dtype=np.float32) -> Tensor:
        if name in self.parameters:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=True, name=name)
        self.parameters[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.parameters[name]

    def __contains__(self, name: str) -> bool:
        return name in self.parameters

    def names(self) -> List[str]:
        return list(self.parameters)

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def astype(self, dtype) -> None:
        for p in self.parameters.values():
            p.data = p.data.astype(dtype)
            p.grad = None

    @staticmethod
    def nodes(output: Tensor) -> List[Tensor]:
        """Recorded tensors reachable from ``output`` in topological order."""
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Fills ``.grad`` on every reachable tensor that requires gradients and
    returns a map from parameter name to gradient; parameters the loss does
    not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph.zero_grad()
    order = Graph.nodes(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
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
    out: Dict[str, np.ndarray] = {}
    for name, p in graph.parameters.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[name] = p.grad
    return out

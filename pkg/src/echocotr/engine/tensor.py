"""Dense tensors and the tape that records differentiable operations."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, NumericalError

DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An n-dimensional float array with an optional gradient buffer.

    ``data`` is a C-contiguous numpy array (float32 or float64). ``grad`` is
    populated by :meth:`Tape.backward` on leaves that have ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        if not np.isfinite(self.data).all():
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the real definitions live in ops.
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
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class Node:
    output: Tensor
    inputs: tuple
    backward: BackwardFn


class Tape:
    """Ordered record of executed differentiable operations.

    Operations only record while a tape is active::

        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn) -> None:
        output.is_leaf = False
        self.nodes.append(Node(output, tuple(inputs), backward))

    def backward(self, output: Tensor) -> None:
        backward(output, self)


_ACTIVE: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(output: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``output``.

    Nodes are replayed in reverse recording order, which visits each node after
    all of its consumers. Leaf gradients accumulate across calls.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    if output.is_leaf and output.requires_grad:
        _accumulate(output, grads[id(output)])
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ContractError(f"gradient shape {gi.shape} does not match input {t.shape}")
            if t.is_leaf:
                _accumulate(t, gi)
            else:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


class MacCounter:
    """Counts multiply-accumulates executed by conv3d, linear and matmul."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def __enter__(self) -> "MacCounter":
        _COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _COUNTERS.remove(self)


_COUNTERS: list[MacCounter] = []


def count_macs(op: str, n: int) -> None:
    for c in _COUNTERS:
        c.total += int(n)
        c.by_op[op] = c.by_op.get(op, 0) + int(n)

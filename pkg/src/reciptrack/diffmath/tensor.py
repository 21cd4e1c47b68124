"""Tensor and tape primitives for reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs require gradients while
it is the active tape of the current thread.  ``Tape.backward`` replays the
records in reverse and accumulates gradients into the leaf tensors.

Outside of an active tape no graph is built, which is how inference runs.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

_DTYPES = {"f64": np.float64, "f32": np.float32}
_default_dtype = np.float64
_local = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A documented precondition of an operation or of the tape was violated."""


class EmptyInputError(ValueError):
    """Reduction over a tensor with no elements."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def set_default_dtype(name: str) -> None:
    """Select the global float width: ``"f64"`` (default) or ``"f32"``."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


def dtype_name(dtype) -> str:
    return "f32" if np.dtype(dtype) == np.float32 else "f64"


class Tensor:
    """Dense float array that may take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_default_dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._recorded = False

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=_default_dtype, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._recorded = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._recorded

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def sum(self, axis=None):
        from . import ops
        return ops.reduce_sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.reduce_mean(self, axis)

    def detach(self) -> "Tensor":
        from . import ops
        return ops.detach(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, op: str, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are appended in execution order, so the
    node list is always topologically sorted.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._outputs: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn) -> None:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                self._leaves.setdefault(id(t), t)
        output.requires_grad = True
        output._recorded = True
        self._outputs.add(id(output))
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every gradient-requiring leaf reached by this tape."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("tape already replayed; record a new tape before calling backward again")
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording on the current thread (inference, finite differences)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _local.stack = []
        return self

    def __exit__(self, *exc):
        _local.stack = self._saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)

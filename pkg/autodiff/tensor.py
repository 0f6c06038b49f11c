"""
Tensor Module for the Autodiff Engine
-------------------------------------
Dense N-C-H-W arrays with reverse-mode gradients.

A `Tensor` wraps a numpy array and, when it was produced by a differentiable op,
the `OpNode` that made it. Calling `backward()` on a scalar tensor sweeps the
recorded graph in reverse topological order and accumulates gradients into every
leaf that has `requires_grad=True`.

Precision is 32-bit by default. `float64_mode()` switches every newly created
tensor to 64-bit, which is what the finite-difference gradient checks run under.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger("cardiac_fcn.autodiff")

_precision = threading.local()


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a tensor."""


def get_default_dtype() -> np.dtype:
    return getattr(_precision, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported precision: {dtype}")
    _precision.dtype = dtype


@contextmanager
def float64_mode():
    """
    Run the enclosed block with 64-bit tensors.

    Example:
        with float64_mode():
            err = gradient_relative_error(...)
    """
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


@dataclass
class OpNode:
    """
    One recorded op in the autodiff graph.

    `backward` maps the upstream gradient to one gradient per parent (None for
    parents that need none). `saved` holds whatever forward kept for backward,
    e.g. pooling argmax indices or the dropout mask.
    """
    op: str
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: Dict[str, object] = field(default_factory=dict)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str = "", _node: Optional[OpNode] = None):
        """
        Args:
            data: array-like values. Floating data is cast to the current default precision.
            requires_grad: whether backward() should populate `.grad` for this tensor.
            name: optional label, used in error messages.
        """
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating) or array.dtype != get_default_dtype():
            array = array.astype(get_default_dtype())
        if not np.all(np.isfinite(array)):
            raise NonFiniteError(f"Tensor {name or '<unnamed>'} contains NaN or Inf values")

        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._node = _node

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node(self) -> Optional[OpNode]:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _toposort(self) -> List["Tensor"]:
        # iterative DFS, the FCN graph is deep enough to hit the recursion limit on long specs
        order: List[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in tensor._node.parents:
                    if id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Reverse sweep from this tensor.

        ================================================

        grad defaults to 1 for scalar (single element) tensors and is required
        otherwise. Leaf gradients accumulate into `.grad`; intermediate tensors
        are released along with their graph once the sweep is done.

        ================================================
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs an explicit gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"Gradient shape {grad.shape} does not match tensor shape {self.shape}")

        pending: Dict[int, np.ndarray] = {id(self): grad}
        for tensor in reversed(self._toposort()):
            upstream = pending.pop(id(tensor), None)
            if upstream is None:
                continue
            if tensor._node is None:
                if tensor.requires_grad:
                    tensor.grad = upstream if tensor.grad is None else tensor.grad + upstream
                continue

            parent_grads = tensor._node.backward(upstream)
            for parent, parent_grad in zip(tensor._node.parents, parent_grads):
                if parent_grad is None or not _needs_grad(parent):
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeError(
                        f"{tensor._node.op} backward produced shape {parent_grad.shape} for input {parent.shape}"
                    )
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + parent_grad
                else:
                    pending[id(parent)] = parent_grad
            if tensor is not self:
                tensor._node = None


def _needs_grad(tensor: Tensor) -> bool:
    return tensor.requires_grad or tensor._node is not None


def make_result(data: np.ndarray, op: str, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
                **saved) -> Tensor:
    """
    Wrap an op's forward output, recording a graph node only when some input
    needs a gradient.
    """
    if any(_needs_grad(p) for p in parents):
        node = OpNode(op=op, parents=tuple(parents), backward=backward, saved=saved)
        return Tensor(data, name=op, _node=node)
    return Tensor(data, name=op)


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)

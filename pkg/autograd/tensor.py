"""Dense tensor with eager tape recording for reverse-mode differentiation.

Every differentiable operation produces a `Tensor` whose `Node` remembers the
parent tensors, the op name, a closure computing the parents' adjoints and a
sequence number. `Tensor.backward` replays the reachable nodes in exact
reverse execution order (descending sequence number).
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union
import itertools
import threading

import numpy as np

from utils.error_handling import ContractError

_state = threading.local()
_sequence = itertools.count()
_DEFAULT_DTYPE = np.dtype(np.float32)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


def get_default_dtype() -> np.dtype:
    """Return the run-wide floating point precision."""
    return _DEFAULT_DTYPE


def set_default_dtype(dtype: Union[str, np.dtype, type]) -> None:
    """Set the run-wide precision: float32 for training, float64 for verification."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"Unsupported precision: {dtype}", "use float32 or float64")
    _DEFAULT_DTYPE = dtype


class precision:
    """Context manager that switches the default dtype for its body."""

    def __init__(self, dtype: Union[str, np.dtype, type]):
        self.dtype = np.dtype(dtype)
        self._previous = None

    def __enter__(self):
        self._previous = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._previous)
        return False


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Disable tape recording on the current thread."""

    def __enter__(self):
        self._previous = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._previous
        return False


@dataclass(eq=False)
class Node:
    """One executed op on the tape."""
    op: str
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    """Dense n-dimensional float array with optional gradient accumulation."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype: Optional[Union[str, np.dtype]] = None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.dtype(dtype) if dtype is not None else get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # --- array protocol -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- differentiation ------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate `.grad` on every requires_grad leaf reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() needs a scalar loss",
                                    f"got shape {self.shape}; pass an explicit output gradient")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order: List[Tensor] = []
        leaves: List[Tensor] = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is None:
                leaves.append(t)
                continue
            order.append(t)
            stack.extend(p for p in t._node.parents if p.requires_grad)
        order.sort(key=lambda t: t._node.seq, reverse=True)

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        if self._node is None:
            _accumulate_leaf(self, grads.pop(id(self)))
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t._node.backward(g)
            for p, pg in zip(t._node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    grads[key] = pg if key not in grads else grads[key] + pg
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)

    # --- operator sugar -------------------------------------------------

    def __add__(self, other):
        return _F.add(self, other)

    def __radd__(self, other):
        return _F.add(other, self)

    def __sub__(self, other):
        return _F.sub(self, other)

    def __rsub__(self, other):
        return _F.sub(other, self)

    def __mul__(self, other):
        return _F.mul(self, other)

    def __rmul__(self, other):
        return _F.mul(other, self)

    def __truediv__(self, other):
        return _F.div(self, other)

    def __rtruediv__(self, other):
        return _F.div(other, self)

    def __neg__(self):
        return _F.neg(self)

    def __pow__(self, exponent: float):
        return _F.power(self, exponent)

    def __matmul__(self, other):
        return _F.matmul(self, other)

    def __getitem__(self, index):
        return _F.index(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _F.reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _F.transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return _F.swapaxes(self, a, b)

    def exp(self) -> "Tensor":
        return _F.exp(self)

    def log(self) -> "Tensor":
        return _F.log(self)

    def sqrt(self) -> "Tensor":
        return _F.sqrt(self)

    def relu(self) -> "Tensor":
        return _F.relu(self)

    def gelu(self) -> "Tensor":
        return _F.gelu(self)


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g)
    if g.shape != leaf.shape:
        g = np.broadcast_to(g, leaf.shape)
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=leaf.dtype, copy=True)
    else:
        leaf.grad = leaf.grad + g


def make_result(data: np.ndarray, parents: Sequence[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
                op: str) -> Tensor:
    """Wrap an op's output and record it on the tape when any parent needs grad."""
    parents = tuple(parents)
    needs_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad, dtype=np.asarray(data).dtype)
    if needs_grad:
        out._node = Node(op, parents, backward)
    return out


def grad(loss: Tensor, inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Return d(loss)/d(input) for each input; zeros for inputs the loss ignores."""
    saved = [t.grad for t in inputs]
    for t in inputs:
        t.grad = None
    try:
        loss.backward()
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    finally:
        for t, g in zip(inputs, saved):
            t.grad = g


from . import functional as _F  # noqa: E402

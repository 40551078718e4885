"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation on a :class:`Tensor` that involves a tensor requiring gradients records
a node (parents + a backward closure). :meth:`Tensor.backward` walks the recorded graph
once in reverse topological order and accumulates adjoints into the leaves.
"""
import contextlib
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import ConfigError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (target networks, rollouts, evaluation)"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation"""

    __array_priority__ = 100
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = ""
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    # ---- graph plumbing -------------------------------------------------

    @classmethod
    def _record(cls, data: np.ndarray, parents: Tuple["Tensor", ...], backward: BackwardFn, op: str) -> "Tensor":
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=track)
        if track:
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def topological_order(self) -> List["Tensor"]:
        """Nodes reachable from self that require gradients, parents before children"""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self) -> Dict[int, np.ndarray]:
        """Accumulate dself/dleaf into every reachable leaf's ``grad``.

        Returns the map of leaf id -> gradient contributed by this call.
        """
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return {}
        adjoints: Dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        contributed: Dict[int, np.ndarray] = {}
        for node in reversed(self.topological_order()):
            grad = adjoints.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                contributed[id(node)] = grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adjoints[key] = adjoints[key] + parent_grad if key in adjoints else parent_grad
        return contributed

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (stop-gradient)"""
        return Tensor(self.data)

    # ---- array protocol -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}, op='{self.op}')"

    # ---- elementwise binary ops ----------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._record(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
        return Tensor._record(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._record(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return Tensor._record(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._record(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise UsageError("only scalar exponents are supported")
        a = self

        def backward(g):
            return (g * exponent * a.data ** (exponent - 1),)
        return Tensor._record(a.data ** exponent, (a,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise ConfigError(f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ConfigError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            grad_a = g @ np.swapaxes(b.data, -1, -2)
            grad_b = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)
        return Tensor._record(a.data @ b.data, (a, b), backward, "matmul")

    # ---- elementwise unary ops -----------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._record(out, (a,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self
        return Tensor._record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def tanh(self) -> "Tensor":
        a = self
        out = np.tanh(a.data)
        return Tensor._record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> "Tensor":
        a = self
        out = np.exp(-np.logaddexp(0.0, -a.data))
        return Tensor._record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self) -> "Tensor":
        a = self
        return Tensor._record(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")

    def elu(self) -> "Tensor":
        a = self
        positive = a.data > 0
        out = np.where(positive, a.data, np.expm1(np.minimum(a.data, 0.0)))
        return Tensor._record(out, (a,), lambda g: (g * np.where(positive, 1.0, out + 1.0),), "elu")

    def abs(self) -> "Tensor":
        a = self
        return Tensor._record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")

    def clip(self, low: float, high: float) -> "Tensor":
        """Clamp; gradient passes only where the input lies inside [low, high]"""
        a = self
        inside = (a.data >= low) & (a.data <= high)
        return Tensor._record(np.clip(a.data, low, high), (a,), lambda g: (g * inside,), "clip")

    # ---- reductions and shape ops --------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return Tensor._record(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        a = self
        return Tensor._record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")

    def __getitem__(self, index) -> "Tensor":
        a = self
        basic = _is_basic_index(index)

        def backward(g):
            grad = np.zeros_like(a.data)
            if basic:
                grad[index] += g
            else:
                np.add.at(grad, index, g)
            return (grad,)
        return Tensor._record(a.data[index], (a,), backward, "index")


def as_tensor(value: Union[Tensor, np.ndarray, float, int]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))
    return Tensor._record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))
    return Tensor._record(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradients"""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---- finite-difference oracle -------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. target.data (mutated in place, then restored)"""
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(fn().data.sum())
            flat[i] = original - h
            minus = float(fn().data.sum())
            flat[i] = original
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between backward() and central differences over inputs"""
    for tensor in inputs:
        tensor.grad = None
    loss = fn()
    if loss.size != 1:
        loss = loss.sum()
    loss.backward()
    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numerical_gradient(fn, tensor, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst

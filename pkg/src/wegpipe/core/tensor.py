"""Dense double-precision tensors with reverse-mode differentiation.

Only the operations the vision transformer needs are provided. Every
operation records its inputs and a backward closure on the output tensor;
``Tensor.backward`` walks the resulting graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import logging
import math
import threading
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, NumericError, ShapeError, UsageError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6
TNSR_MAGIC = "TNSR"
TNSR_VERSION = 1

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715

Operand = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the compute graph holding a float64 array."""

    __array_priority__ = 100

    def __init__(self, data: Operand, requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._retain = False
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        """Wrap the result of an operation, recording it when grad is on.

        ``backward`` maps the output gradient to one gradient (or None) per
        parent; broadcasting is undone by the graph.
        """
        parents = tuple(parents)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = cls(data, requires_grad=track)
        if track:
            out.op = op
            out._parents = parents
            out._backward = backward
        return out

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient after backward; leaves always keep theirs."""
        self._retain = True
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # --- operators -----------------------------------------------------

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other: Operand) -> "Tensor":
        return add(other, neg(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: Operand) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: Union[int, float]) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise UsageError("tensors may only be divided by a constant")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def backward(self) -> "ComputeGraph":
        graph = ComputeGraph(self)
        graph.backward()
        return graph


def as_tensor(value: Operand) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class ComputeGraph:
    """The tensors reachable from ``root``, parents before children.

    Intermediate gradients are released once propagated unless the tensor
    asked to retain them.
    """

    def __init__(self, root: Tensor) -> None:
        self.root = root
        self.nodes: List[Tensor] = _topological_order(root)

    def backward(self) -> None:
        root = self.root
        if root.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            if not node._retain:
                node.grad = None
            for parent, grad in zip(node._parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                grad = _unbroadcast(np.asarray(grad, dtype=np.float64), parent.shape)
                if parent.grad is None:
                    parent.grad = grad.copy()
                else:
                    parent.grad = parent.grad + grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


# --- element-wise ops --------------------------------------------------


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return Tensor.from_op(data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc
    return Tensor.from_op(data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return Tensor.from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * local,)

    return Tensor.from_op(data, (a,), backward, "gelu")


# --- reductions and shape ops ---------------------------------------


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    if any(not -ndim <= ax < ndim for ax in axis):
        raise ShapeError(f"axis {axis} out of range for a rank-{ndim} tensor")
    return tuple(sorted(ax % ndim for ax in axis))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g: np.ndarray):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tensor_sum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return Tensor.from_op(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = np.broadcast_to(a.data, tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return Tensor.from_op(np.array(data), (a,), lambda g: (g,), "broadcast")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"cannot concatenate shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(data, tensors, backward, "concat")


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (slicing)."""
    try:
        data = np.array(a.data[index])
    except IndexError as exc:
        raise ShapeError(f"index {index!r} out of range for shape {a.shape}") from exc

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(data, (a,), backward, "slice")


# --- linear algebra and normalisations -------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product over the last two axes, batching over the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} and {b.shape}") from exc

    def backward(g: np.ndarray):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return Tensor.from_op(data, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite input")
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    width = a.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim of {a.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray):
        gx = g * gamma.data
        dx = inv_std * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, g * xhat, g

    return Tensor.from_op(out, (a, gamma, beta), backward, "layer_norm")


# --- gradient oracle ---------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """Largest relative gap between the analytic and central-difference gradient.

    ``indices`` restricts the check to selected flat entries of ``x``.
    """
    watched = Tensor(x.data.copy(), requires_grad=True)
    f(watched).backward()
    analytic = watched.grad if watched.grad is not None else np.zeros(watched.shape)

    base = x.data.copy()
    flat = base.reshape(-1)
    entries = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in entries:
            original = flat[i]
            flat[i] = original + eps
            upper = f(Tensor(base)).item()
            flat[i] = original - eps
            lower = f(Tensor(base)).item()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * eps)
            gap = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-12)
            worst = max(worst, gap)
    logger.debug("finite-difference check over %d entries: %.3e", len(entries), worst)
    return worst


# --- TNSR container ----------------------------------------------------


def encode_tnsr(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    dims = " ".join(str(d) for d in array.shape)
    header = f"{TNSR_MAGIC} {TNSR_VERSION} {array.ndim}" + (f" {dims}" if dims else "") + "\n"
    return header.encode("ascii") + array.astype("<f8").tobytes(order="C")


def decode_tnsr(blob: bytes) -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise FormatError("TNSR header is not terminated")
    fields = blob[:newline].decode("ascii", errors="replace").split()
    if len(fields) < 3 or fields[0] != TNSR_MAGIC:
        raise FormatError("missing TNSR magic")
    try:
        version, rank = int(fields[1]), int(fields[2])
        dims = tuple(int(d) for d in fields[3:])
    except ValueError as exc:
        raise FormatError(f"malformed TNSR header: {fields!r}") from exc
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    if len(dims) != rank or any(d < 0 for d in dims):
        raise FormatError(f"TNSR header declares rank {rank} but lists dims {dims}")
    payload = blob[newline + 1 :]
    expected = int(np.prod(dims, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise FormatError(f"TNSR payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tnsr(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tnsr(array))


def load_tnsr(path: Union[str, Path]) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read tensor file {path}: {exc}") from exc
    return decode_tnsr(blob)

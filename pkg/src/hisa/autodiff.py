"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` linearises the graph into a :class:`ComputationTape`
(topological order) and replays it in reverse.

Broadcasting is deliberately narrow. Element-wise binary operations accept
operands whose shapes are equal, or where the smaller shape is a suffix of the
larger one (missing leading dimensions are broadcast). Anything else must be
made explicit with :meth:`Tensor.expand` or :meth:`Tensor.reshape`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import MaskError, NumericalError, ShapeError, VocabularyError

_DEFAULT_DTYPE = np.float64
_state = threading.local()

# Finite-value checks on every forward result. Disable only for profiling.
CHECK_FINITE = True


def set_default_dtype(dtype) -> None:
    """Set the floating-point precision used for newly created tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (numpy broadcasting rules)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __array_priority__ = 1000  # make ndarray ⊕ Tensor defer to Tensor

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # --------------------------------------------------------- graph plumbing
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
            raise NumericalError(f"non-finite values produced by '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        need = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = need
        if need:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    def _binary_shapes(self, other: "Tensor", op: str) -> None:
        if not _suffix_compatible(self.shape, other.shape):
            raise ShapeError(
                f"{op}: shapes {self.shape} and {other.shape} are not suffix-compatible; "
                "use expand() or reshape() explicitly"
            )

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_shapes(other, "add")
        a, b = self, other

        def backward(g):
            return _sum_to(g, a.shape), _sum_to(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_shapes(other, "sub")
        a, b = self, other

        def backward(g):
            return _sum_to(g, a.shape), _sum_to(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_shapes(other, "mul")
        a, b = self, other

        def backward(g):
            return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._lift(other)
        self._binary_shapes(other, "div")
        a, b = self, other

        def backward(g):
            ga = g / b.data
            return _sum_to(ga, a.shape), _sum_to(-ga * a.data / b.data, b.shape)

        return Tensor._make(a.data / b.data, (a, b), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return self._lift(other) / self

    def __neg__(self) -> "Tensor":
        def backward(g):
            return (-g,)

        return Tensor._make(-self.data, (self,), backward, "neg")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # ------------------------------------------------------- unary functions
    def exp(self) -> "Tensor":
        y = np.exp(self.data)

        def backward(g):
            return (g * y,)

        return Tensor._make(y, (self,), backward, "exp")

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(x)

        def backward(g):
            return (g / x,)

        return Tensor._make(y, (self,), backward, "log")

    def sigmoid(self) -> "Tensor":
        y = 0.5 * (1.0 + np.tanh(0.5 * self.data))

        def backward(g):
            return (g * y * (1.0 - y),)

        return Tensor._make(y, (self,), backward, "sigmoid")

    def relu(self) -> "Tensor":
        x = self.data
        y = np.maximum(x, 0.0)

        def backward(g):
            return (g * (x > 0),)

        return Tensor._make(y, (self,), backward, "relu")

    def clamp_min(self, floor: float) -> "Tensor":
        """``max(x, floor)``; gradient passes only where ``x > floor``."""
        x = self.data
        y = np.maximum(x, floor)

        def backward(g):
            return (g * (x > floor),)

        return Tensor._make(y, (self,), backward, "clamp_min")

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        y = self.data.sum(axis=axis, keepdims=keepdims)
        y = np.asarray(y, dtype=self.dtype)

        def backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(a % len(shape) for a in axes)
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(y, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        if count == 0:
            raise ShapeError(f"mean over empty axis of shape {self.shape}")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ------------------------------------------------------ shape operations
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            y = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {old} into {shape}") from exc

        def backward(g):
            return (g.reshape(old),)

        return Tensor._make(y, (self,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))

        def backward(g):
            return (g.transpose(inv),)

        return Tensor._make(self.data.transpose(axes), (self,), backward, "transpose")

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def backward(g):
            return (g.swapaxes(a, b),)

        return Tensor._make(self.data.swapaxes(a, b), (self,), backward, "swapaxes")

    def expand(self, *shape) -> "Tensor":
        """Broadcast to ``shape`` under numpy rules; gradient sums back."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            y = np.broadcast_to(self.data, shape)
        except ValueError as exc:
            raise ShapeError(f"cannot expand {old} to {shape}") from exc

        def backward(g):
            return (_sum_to(g, old),)

        return Tensor._make(y, (self,), backward, "expand")

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with integer arrays, not Tensors")
        shape = self.shape
        dtype = self.dtype
        y = self.data[idx]

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.asarray(y), (self,), backward, "getitem")

    # ----------------------------------------------------- fused operations
    def softmax(self, axis: int = -1, mask: np.ndarray | None = None) -> "Tensor":
        return softmax(self, axis=axis, mask=mask)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return log_softmax(self, axis=axis)

    # --------------------------------------------------------------- backward
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor
        with ``requires_grad``. ``self`` must be a scalar unless ``grad`` is given.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape, dtype=self.dtype)
        ComputationTape.from_output(self).backward(self, grad)


class ComputationTape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def backward(self, out: Tensor, grad: np.ndarray) -> None:
        if not out.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                # leaves get an owned contiguous buffer; intermediates may alias
                node.grad = np.array(g, dtype=node.dtype) if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# ---------------------------------------------------------------- functions
def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul leading dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _sum_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (True = keep) zeroes entries exactly."""
    z = x.data
    if z.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis of shape {z.shape}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise MaskError("mask hides every entry of at least one softmax row")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    if z.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis of shape {z.shape}")
    shifted = z - z.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward, "log_softmax")


def normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Layer-norm statistics step: zero-mean, unit-variance over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor._make(y, (x,), backward, "normalize")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat shapes differ off-axis: {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(data, tuple(tensors), backward, "concat")


def split(x: Tensor, sections: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into equal parts (int) or at the given sizes."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or n % sections:
            raise ShapeError(f"cannot split axis of size {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ShapeError(f"split sizes {sizes} do not sum to {n}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        out.append(x[tuple(idx)])
        start += s
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise VocabularyError(f"token id out of range [0, {rows}): {ids.min()}..{ids.max()}")

    def backward(g):
        full = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._make(table.data[ids], (table,), backward, "embedding")


def gather_last(x: Tensor, index) -> Tensor:
    """``out[...] = x[..., index[...]]``, picking one entry along the last axis."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"gather index shape {index.shape} must equal {x.shape[:-1]}")
    idx = index[..., None]
    y = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return Tensor._make(y, (x,), backward, "gather_last")


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep, dtype=x.dtype)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


# ---------------------------------------------------------- gradient checks
def numerical_gradient(f: Callable[[], Tensor], target: Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``target``.

    ``target.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def gradient_errors(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-4,
    atol: float = 1e-7,
) -> list[float]:
    """Worst per-component relative error between analytic and numeric gradients.

    Component error is ``|a - n| / max(|a|, |n|, atol/rtol-floor)`` with the floor
    set by ``atol`` so components that are both ~0 do not divide by zero.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    f().backward()
    errs = []
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(f, t, eps)
        diff = np.abs(analytic - numeric)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
        errs.append(float((diff / scale).max()) if diff.size else 0.0)
    return errs

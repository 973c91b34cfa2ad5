"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations executed while a :class:`Tape` is active (``with tape:``) and that
touch at least one tensor with ``requires_grad`` are recorded. Calling
``tape.backward(loss)`` replays the records in reverse and accumulates
gradients into the ``.grad`` of every leaf tensor that requires them.

Parameters and activations default to float32. ``precision(np.float64)``
switches the default so that finite-difference checks can run on a 64-bit
replica of the same graph.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, DomainError, OptimizerError, ParameterError, TapeError

_DEFAULT_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors."""
    _DEFAULT_DTYPE.append(np.dtype(dtype))
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-threaded. Gradients accumulate additively into leaf
    ``.grad`` buffers until they are reset, so call :meth:`clear` (or use a
    fresh tape) between optimisation steps.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self._nodes.append(_Node(out, tuple(parents), backward))
        self._outputs.add(id(out))

    def clear(self) -> None:
        self._nodes.clear()
        self._outputs.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape).astype(parent.dtype, copy=False)
                if id(parent) in self._outputs:
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
                elif parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active tape.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _binary_data(a: Tensor, b: Tensor, fn, opname):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from exc


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_data(a, b, np.add, "add")
    return apply_op(out, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_data(a, b, np.subtract, "sub")
    return apply_op(out, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_data(a, b, np.multiply, "mul")
    return apply_op(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary_data(a, b, np.divide, "div")
    return apply_op(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    return apply_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return apply_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return apply_op(out, (a,), lambda g: (g * out * (1 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return apply_op(out, (a,), lambda g: (g * mask,))


# -- linear algebra and reductions ------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return apply_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return apply_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` recorded as a single op."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return apply_op(out, (x, weight, bias), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return apply_op(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (x,), bw)


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an explicit random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return apply_op(x.data * keep, (x,), lambda g: (g * keep,))


# -- row routing -------------------------------------------------------------

def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(x.data[index], (x,), bw)


def scatter_rows(parts: Sequence[Tensor], indices: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Assemble an ``n_rows`` matrix whose rows ``indices[j]`` come from ``parts[j]``.

    Rows not covered by any index stay zero; indices must be disjoint.
    """
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("scatter_rows needs at least one part")
    width = parts[0].shape[1]
    out = np.zeros((n_rows, width), dtype=parts[0].dtype)
    indices = [np.asarray(ix, dtype=np.intp) for ix in indices]
    for p, ix in zip(parts, indices):
        if p.shape != (len(ix), width):
            raise DimensionError(f"scatter_rows: part {p.shape} does not match {len(ix)} rows x {width}")
        out[ix] = p.data
    return apply_op(out, parts, lambda g: tuple(g[ix] for ix in indices))


# -- optimiser -----------------------------------------------------------------

class Adam:
    """Adam with bias correction over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, allow_missing: bool = False) -> None:
        """One update. With ``allow_missing`` parameters whose ``grad`` is None
        (e.g. experts that received no samples) are left untouched, moments
        included; otherwise a missing gradient is an error."""
        if not allow_missing:
            for name, p in self.params.items():
                if p.grad is None:
                    raise OptimizerError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (self.lr / bc1) * m / denom

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            for slot, store in (("m", self.m), ("v", self.v)):
                arr = tensors.get(f"adam.{slot}.{k}")
                if arr is None:
                    raise OptimizerError(f"optimizer state missing for parameter {k!r}")
                if arr.shape != p.shape:
                    raise OptimizerError(f"optimizer state for {k!r} has shape {arr.shape}, expected {p.shape}")
                store[k] = np.array(arr, dtype=p.dtype)
        self.t = int(t)


# -- finite differences ----------------------------------------------------------

def numerical_grad(fn: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad

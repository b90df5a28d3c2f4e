"""Dense tensors with tape-based reverse-mode automatic differentiation.

Each operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward`` walks the resulting DAG in reverse topological
order.  Storage is plain row-major numpy arrays (float32 by default, float64
inside ``default_dtype(np.float64)`` for gradient oracles).
"""
from __future__ import annotations

import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "ShapeError", "ContractError", "GradCheckReport",
    "tensor", "zeros", "ones", "matmul", "concat", "gather", "scatter",
    "softmax", "gelu", "prelu", "sigmoid", "where_const",
    "no_grad", "is_grad_enabled", "default_dtype", "get_default_dtype",
    "count_flops", "grad_check", "rng_stream",
]


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


_DEFAULT_DTYPE = np.dtype(np.float32)
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 oracles)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def count_flops():
    """Count floating point operations of every op executed in the block.

    Matmuls count 2 * multiply-accumulates; elementwise ops and reductions
    count one operation per element of their largest operand.  Yields a dict
    whose ``"flops"`` entry is updated in place.
    """
    prev = getattr(_local, "flops", None)
    counter = {"flops": 0}
    _local.flops = counter
    try:
        yield counter
    finally:
        _local.flops = prev


def _add_flops(n: int) -> None:
    counter = getattr(_local, "flops", None)
    if counter is not None:
        counter["flops"] += int(n)


def rng_stream(seed: int, *path) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``seed / path...``.

    Path elements may be ints or strings; identical (seed, path) pairs always
    yield identical streams, and distinct paths yield independent ones.
    """
    key = tuple(p if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode())
                for p in path)
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = _DEFAULT_DTYPE if dtype is None else dtype
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable, op: str) -> "Tensor":
        """Build an op output.  ``backward(g)`` returns one gradient per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- properties -------------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype).reshape(self.shape)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic -------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        b = self._lift(other)
        a = self
        out = a.data + b.data
        _add_flops(out.size)
        return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        b = self._lift(other)
        a = self
        out = a.data - b.data
        _add_flops(out.size)
        return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        b = self._lift(other)
        a = self
        out = a.data * b.data
        _add_flops(out.size)

        def back(g):
            return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
        return Tensor.from_op(out, (a, b), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._lift(other)
        a = self
        out = a.data / b.data
        _add_flops(out.size)

        def back(g):
            return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                    _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
        return Tensor.from_op(out, (a, b), back, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        a = self
        return Tensor.from_op(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self
        p = float(p)
        out = a.data ** p
        _add_flops(out.size)
        return Tensor.from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, idx):
        a = self
        out = np.ascontiguousarray(a.data[idx])

        def back(g):
            z = np.zeros_like(a.data)
            if _is_basic_index(idx):
                z[idx] += g
            else:
                np.add.at(z, idx, g)
            return (z,)
        return Tensor.from_op(out, (a,), back, "slice")

    # -- unary ------------------------------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        _add_flops(out.size)
        return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        with np.errstate(divide="ignore"):
            out = np.log(a.data)
        _add_flops(out.size)
        return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        return self ** 0.5

    def clip(self, lo: float, hi: float):
        a = self
        out = np.clip(a.data, lo, hi)
        inside = (a.data >= lo) & (a.data <= hi)
        return Tensor.from_op(out, (a,), lambda g: (g * inside,), "clip")

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
        _add_flops(a.size)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)
        return Tensor.from_op(out, (a,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def var(self, axis=None, keepdims: bool = False, ddof: int = 0):
        a = self
        mu = a.data.mean(axis=axis, keepdims=True)
        centered = a.data - mu
        n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        out = np.asarray((centered ** 2).sum(axis=axis, keepdims=keepdims) / (n - ddof))
        _add_flops(3 * a.size)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (g * centered * (2.0 / (n - ddof)),)
        return Tensor.from_op(out, (a,), back, "var")

    def max(self, axis=None, keepdims: bool = False):
        a = self
        out_k = a.data.max(axis=axis, keepdims=True)
        out = out_k if keepdims else np.asarray(a.data.max(axis=axis))
        _add_flops(a.size)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            hit = (a.data == out_k)
            return (g * hit / hit.sum(axis=axis, keepdims=True),)
        return Tensor.from_op(out, (a,), back, "max")

    # -- shape ------------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = a.data.reshape(shape)
        return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
        inv = tuple(np.argsort(axes))
        out = np.ascontiguousarray(a.data.transpose(axes))
        return Tensor.from_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")

    def swapaxes(self, a1: int, a2: int):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)

    # -- activations ------------------------------------------------------
    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def gelu(self):
        return gelu(self)

    def sigmoid(self):
        return sigmoid(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, _DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, _DEFAULT_DTYPE), requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # (..., K) @ (K, N) as one 2-D GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    _add_flops(2 * out.size * a.shape[-1])

    def back(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a2.T @ g2
        else:
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return Tensor.from_op(out, (a, b), back, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))
    return Tensor.from_op(out, tensors, back, "concat")


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows per batch element: ``x[b, index[b, k]]`` for x of shape [B, P, ...]."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather index shape {index.shape} does not match batch {x.shape[0]}")
    bidx = np.arange(x.shape[0])[:, None]
    out = x.data[bidx, index]

    def back(g):
        z = np.zeros_like(x.data)
        np.add.at(z, (bidx, index), g)
        return (z,)
    return Tensor.from_op(out, (x,), back, "gather")


def scatter(x: Tensor, index: np.ndarray, size: int) -> Tensor:
    """Inverse of ``gather`` onto a zero sequence of length ``size``; indices must be unique per row."""
    index = np.asarray(index, dtype=np.int64)
    bidx = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], size) + x.shape[2:], dtype=x.dtype)
    out[bidx, index] = x.data

    def back(g):
        return (g[bidx, index],)
    return Tensor.from_op(out, (x,), back, "scatter")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    _add_flops(4 * x.size)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor.from_op(y, (x,), back, "softmax")


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _SQRT_HALF))
    out = (x.data * cdf).astype(x.dtype, copy=False)
    _add_flops(8 * x.size)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)
    return Tensor.from_op(out, (x,), back, "gelu")


def prelu(x: Tensor, slope) -> Tensor:
    """max(0, x) + slope * min(0, x); ``slope`` broadcasts against the last axis."""
    slope = slope if isinstance(slope, Tensor) else Tensor(np.asarray(slope, x.dtype))
    pos = x.data > 0
    out = np.where(pos, x.data, slope.data * x.data).astype(x.dtype, copy=False)
    _add_flops(2 * x.size)

    def back(g):
        gx = g * np.where(pos, 1.0, slope.data).astype(x.dtype, copy=False)
        gs = _unbroadcast(g * np.where(pos, 0.0, x.data), slope.shape) if slope.requires_grad else None
        return gx, gs
    return Tensor.from_op(out, (x, slope), back, "prelu")


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data).astype(x.dtype, copy=False)
    _add_flops(4 * x.size)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def where_const(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """``x`` where ``cond`` holds, else the constant ``fill`` (no gradient there)."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, x.data, np.asarray(fill, x.dtype))
    return Tensor.from_op(out, (x,), lambda g: (_unbroadcast(g * cond, x.shape),), "where")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    tol: float

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-3, tol: float = 1e-3,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    The error is the largest absolute discrepancy divided by the largest
    gradient magnitude (from either route), so it is scale free.  At most
    ``max_coords`` randomly chosen coordinates per input are probed.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    saved = [(x.requires_grad, x.grad) for x in xs]
    try:
        with no_grad():
            v1 = f(*xs).data.copy()
            v2 = f(*xs).data.copy()
        if v1.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        if not np.array_equal(v1, v2, equal_nan=True):
            raise ContractError("function is not deterministic across repeated evaluation")

        for x in xs:
            x.requires_grad = True
            x.grad = None
        out = f(*xs)
        if out.requires_grad:
            out.backward()
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

        rng = np.random.default_rng(seed)
        a_vals, n_vals = [], []
        with no_grad():
            for x, an in zip(xs, analytic):
                flat = x.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = rng.choice(flat.size, size=max_coords, replace=False)
                for j in coords:
                    orig = flat[j].copy()
                    flat[j] = orig + eps
                    up = flat[j].astype(np.float64)
                    fp = float(f(*xs).data.reshape(-1)[0])
                    flat[j] = orig - eps
                    down = flat[j].astype(np.float64)
                    fm = float(f(*xs).data.reshape(-1)[0])
                    flat[j] = orig
                    n_vals.append((fp - fm) / (up - down))
                    a_vals.append(float(an.reshape(-1)[j]))
    finally:
        for x, (rg, gr) in zip(xs, saved):
            x.requires_grad = rg
            x.grad = gr

    a = np.asarray(a_vals)
    n = np.asarray(n_vals)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    err = 0.0 if scale == 0.0 else float(np.abs(a - n).max() / scale)
    return GradCheckReport(max_rel_error=err, passed=err < tol, n_checked=len(a), tol=tol)

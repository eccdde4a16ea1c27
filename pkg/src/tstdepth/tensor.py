"""Dense N-d tensor with reverse-mode autodiff on top of numpy.

Every op builds its output with :func:`_result`, which records the parents
and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, NumericalError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad_enabled = True
        _state.check_finite = True
        _state.mac_counter = None
    return _state


def default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dt}; use float32 or float64")
    _st().dtype = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (float64 for grad checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _st().dtype = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def is_grad_enabled() -> bool:
    return _st().grad_enabled


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    st = _st()
    old = st.check_finite
    st.check_finite = enabled
    try:
        yield
    finally:
        st.check_finite = old


class MacCounter:
    """Accumulates multiply-accumulates executed by the matmul and conv kernels."""

    def __init__(self) -> None:
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


@contextlib.contextmanager
def count_executed_macs() -> Iterator[MacCounter]:
    st = _st()
    old = st.mac_counter
    counter = MacCounter()
    st.mac_counter = counter
    try:
        yield counter
    finally:
        st.mac_counter = old


def _record_macs(kind: str, n: int) -> None:
    counter = _st().mac_counter
    if counter is not None:
        counter.add(kind, n)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
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
            # free the tape as we go
            node._backward = None
            node._parents = ()

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> "Tensor":
        return power(self, exponent)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    st = _st()
    if st.check_finite and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = st.grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------------
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bw, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bw, "div")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = ad**exponent
    return _result(out, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
        "maximum",
    )


# -- elementwise unary -----------------------------------------------------------
def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,), "log")


def sqrt(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu6(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.clip(xd, 0.0, 6.0)
    # subgradient 0 at both kinks
    return _result(out, (x,), lambda g: (g * ((xd > 0) & (xd < 6)),), "relu6")


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def softmax(x: ArrayLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"softmax axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


# -- reductions / shape ------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ConfigError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x: ArrayLike, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ConfigError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "permute")


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ConfigError("concat of an empty list")
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ConfigError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def getitem(x: ArrayLike, index) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    out = x.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), bw, "getitem")


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting rules)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _record_macs("matmul", out.size * ad.shape[-1])

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "matmul")

"""Dense float64 tensors with reverse-mode differentiation.

Every op records a vector-Jacobian product written in terms of other tensor
ops. When ``grad`` runs with ``create_graph=True`` those products are
themselves recorded, so the returned gradients can be differentiated again.
That is what makes it possible to differentiate a loss evaluated at
parameters that were produced by a gradient step.

Broadcasting follows numpy rules; reverse passes reduce back to the operand
shape with ``sum_to``.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "DomainError",
    "ContractError",
    "tensor",
    "constant",
    "grad",
    "no_grad",
    "grad_enabled",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "exp",
    "log",
    "reciprocal",
    "sum",
    "mean",
    "concat_rows",
    "select_rows",
    "scatter_rows",
    "squared_l2_norm",
    "norm",
    "logsumexp",
    "log_softmax",
    "softmax",
    "sum_to",
    "broadcast_to",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Input outside the domain of the function (e.g. log of 0)."""


class ContractError(ValueError):
    """Caller broke an API precondition."""


_ids = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


grad_mode = _grad_mode


def no_grad():
    """Context manager: ops inside build no graph."""
    return _grad_mode(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "_id", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self._id = next(_ids)
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

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
    def node_id(self) -> int | None:
        """Graph handle; None for constants."""
        return self._id if self.requires_grad else None

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return mul(self, reciprocal(_as_tensor(other)))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, vjp: Callable, op: str) -> Tensor:
    if getattr(_state, "enabled", True):
        for p in parents:
            if p.requires_grad:
                return Tensor(data, True, parents, vjp, op)
    return Tensor(data)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- reductions


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    if lead:
        out = out.reshape(out.shape[lead:])
    return out.reshape(shape)


def sum_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Sum ``a`` down to a broadcast-compatible ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape
    return _make(
        _sum_to_array(a.data, shape),
        (a,),
        lambda g: (broadcast_to(g, in_shape),),
        "sum_to",
    )


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    in_shape = a.shape
    return _make(data, (a,), lambda g: (sum_to(g, in_shape),), "broadcast_to")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(g.data, axis).shape)
        return (broadcast_to(g, in_shape),)

    return _make(data, (a,), vjp, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    return scalar_mul(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(g, sb) if b.requires_grad else None,
        ),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (
            sum_to(g, sa) if a.requires_grad else None,
            sum_to(scalar_mul(g, -1.0), sb) if b.requires_grad else None,
        ),
        "sub",
    )


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            sum_to(mul(g, b), sa) if a.requires_grad else None,
            sum_to(mul(g, a), sb) if b.requires_grad else None,
        ),
        "mul",
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (scalar_mul(g, s),), "scalar_mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {in_shape} to {tuple(shape)}") from None
    return _make(data, (a,), lambda g: (reshape(g, in_shape),), "reshape")


# ------------------------------------------------------------- nonlinearities


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    mask = pos.astype(np.float64)
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), None, "exp")
    if out.requires_grad:
        out._vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _make(np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),), "log")


def reciprocal(a: Tensor) -> Tensor:
    """1/a elementwise, with the convention 1/0 = 0 (derivative 0 there too)."""
    nz = a.data != 0
    data = np.divide(1.0, a.data, out=np.zeros_like(a.data), where=nz)
    out = _make(data, (a,), None, "reciprocal")
    if out.requires_grad:
        out._vjp = lambda g: (scalar_mul(mul(g, mul(out, out)), -1.0),)
    return out


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out_k = _make(lse, (a,), None, "logsumexp")
    if out_k.requires_grad:
        out_k._vjp = lambda g: (mul(g, exp(sub(a, out_k))),)
    if keepdims:
        return out_k
    return reshape(out_k, np.squeeze(lse, axis=axis).shape)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _make(data, (a,), None, "log_softmax")
    if out.requires_grad:
        out._vjp = lambda g: (sub(g, mul(exp(out), sum(g, axis=axis, keepdims=True))),)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """exp(a - max) / sum(exp(a - max))."""
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = _make(e / e.sum(axis=axis, keepdims=True), (a,), None, "softmax")
    if out.requires_grad:
        out._vjp = lambda g: (mul(out, sub(g, sum(mul(g, out), axis=axis, keepdims=True))),)
    return out


# --------------------------------------------------------------- row indexing


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_rows of an empty list")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.ndim == 0 or p.shape[1:] != tail:
            raise DimensionError("concat_rows: trailing shapes differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(
            select_rows(g, np.arange(lo, hi)) if p.requires_grad else None
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:])
        )

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp, "concat_rows")


def select_rows(a: Tensor, index) -> Tensor:
    """Gather rows (axis 0) by integer index; repeats allowed."""
    index = np.asarray(index, dtype=np.intp)
    if a.ndim == 0:
        raise DimensionError("select_rows on a scalar")
    n = a.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise DimensionError(f"select_rows: index out of range for {n} rows")
    return _make(a.data[index], (a,), lambda g: (scatter_rows(g, index, n),), "select_rows")


def scatter_rows(g: Tensor, index, n_rows: int) -> Tensor:
    """Adjoint of select_rows: sum rows of ``g`` into a zero tensor of n_rows rows."""
    index = np.asarray(index, dtype=np.intp)
    data = np.zeros((n_rows,) + g.shape[1:])
    np.add.at(data, index, g.data)
    return _make(data, (g,), lambda h: (select_rows(h, index),), "scatter_rows")


# ---------------------------------------------------------------------- norms


def squared_l2_norm(a: Tensor) -> Tensor:
    return _make(
        np.asarray(np.sum(a.data * a.data)),
        (a,),
        lambda g: (scalar_mul(mul(g, a), 2.0),),
        "squared_l2_norm",
    )


def norm(a: Tensor, axis: int | None = None) -> Tensor:
    """Euclidean norm over all entries, or along ``axis``.

    The derivative at a zero vector is taken to be zero.
    """
    out_k = _make(
        np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True)), (a,), None, "norm"
    )
    if out_k.requires_grad:
        out_k._vjp = lambda g: (mul(a, mul(g, reciprocal(out_k))),)
    shape = () if axis is None else np.squeeze(out_k.data, axis=axis).shape
    return reshape(out_k, shape)


# -------------------------------------------------------------------- backward


def _topo(output: Tensor) -> list[Tensor]:
    seen = set()
    order = []
    stack = [output]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        order.append(node)
        stack.extend(node._parents)
    # parents are always created before children, so ids are a topological order
    order.sort(key=lambda n: n._id, reverse=True)
    return order


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """d output / d wrt for a scalar ``output``.

    Tensors in ``wrt`` that ``output`` does not depend on get exact zeros.
    With ``create_graph`` the returned gradients are graph nodes and may be
    differentiated again.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    keep = {t._id for t in wrt}
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[output._id] = Tensor(np.ones_like(output.data))
        with _grad_mode(create_graph):
            for node in _topo(output):
                g = grads.get(node._id) if node._id in keep else grads.pop(node._id, None)
                if g is None or node._vjp is None:
                    continue
                for parent, pg in zip(node._parents, node._vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = grads.get(parent._id)
                    grads[parent._id] = pg if acc is None else add(acc, pg)
    out = []
    for t in wrt:
        g = grads.get(t._id)
        out.append(Tensor(np.zeros_like(t.data)) if g is None else g)
    return out

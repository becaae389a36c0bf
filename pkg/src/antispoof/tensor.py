"""Dense NHWC tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active are recorded in execution order; :func:`backward`
walks that record once, in reverse, and hands back gradients.

Training runs in float32. Passing ``dtype=np.float64`` gives the
verification mode used by gradient checks; in that mode the contraction
kernels in :mod:`antispoof.ops` also switch to a fixed sequential
summation order so they can be compared against loop references exactly.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor contract violations."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class TapeError(TensorError, RuntimeError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the differentiable ops run inside a ``with`` block."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if self in _TAPES:
            _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        arr = np.array(data, dtype=dtype, copy=True) if dtype is not None else np.asarray(data)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    # arithmetic sugar; broadcasting is restricted to scalars and trailing bias vectors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype or np.float32)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, enforce finiteness, and record it on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Reverse pass over ``tape`` starting from scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive ``.grad``. The returned dict
    holds gradients for those leaves plus any extra tensors named in ``wrt``
    (intermediate feature maps, for instance). The tape cannot be reused.
    """
    if tape.consumed:
        raise TapeError("backward called twice on the same tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise TapeError("tape is empty; nothing was recorded")
    if _TAPES and tape in _TAPES:
        _TAPES.remove(tape)
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None:
            continue
        pgrads = node._backward(g)
        for parent, pg in zip(node._parents, pgrads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                owners[key] = parent

    wanted = {id(t): t for t in wrt}
    result: dict[Tensor, np.ndarray] = {}
    for key, t in owners.items():
        if t._backward is None and t.requires_grad:
            t.grad = grads[key].astype(t.dtype, copy=False).reshape(t.shape)
            result[t] = t.grad
        elif key in wanted:
            result[t] = grads[key].reshape(t.shape)
    for key, t in wanted.items():
        if t not in result:
            result[t] = np.zeros_like(t.data)
    for node in tape.nodes:
        node._backward = None
        node._parents = ()
    tape.nodes.clear()
    return result


# elementwise primitives ------------------------------------------------------


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) != 0:
        raise ShapeError("only python scalars may be mixed with tensors")
    return Tensor(x, dtype=like.dtype)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or b.size == 1 and b.data.ndim == 0 or a.size == 1 and a.data.ndim == 0:
        return
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.data.ndim == 1 and b.data.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def add(a, b) -> Tensor:
    a = _operand(a, b) if not isinstance(a, Tensor) else a
    b = _operand(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return make_node(a.data + b.data, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a = _operand(a, b) if not isinstance(a, Tensor) else a
    b = _operand(b, a)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape

    def _bw(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return make_node(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a = _operand(a, b) if not isinstance(a, Tensor) else a
    b = _operand(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def _bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return make_node(ad * bd, (a, b), _bw, "mul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def _bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), _bw, "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size

    def _bw(g):
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return make_node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), _bw, "mean")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def _bw(g):
        return (g.reshape(old),)

    return make_node(a.data.reshape(shape), (a,), _bw, "reshape")


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def _bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_node(np.array(a.data[index]), (a,), _bw, "getitem")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise NonFiniteError("log of non-positive value")

    def _bw(g):
        return (g / ad,)

    return make_node(np.log(ad), (a,), _bw, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)

    def _bw(g):
        return (g * inside,)

    return make_node(np.clip(ad, lo, hi), (a,), _bw, "clip")

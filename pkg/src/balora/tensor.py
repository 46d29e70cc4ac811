"""Dense float64 tensors with a reverse-mode gradient tape.

The tape is built eagerly: each operation stores its parents and a
vector-Jacobian closure on the output node. :func:`backward` walks the
graph once in reverse topological order, accumulates gradients into the
``grad`` field of every leaf that requires them, and consumes the tape.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands so every gradient rule stays auditable. Every
completed operation is checked for NaN/Inf and raises instead of
propagating poison values.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .rng import Rng

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "TapeError",
    "no_grad",
    "backward",
    "randn",
    "matmul",
    "linear",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeError(TensorError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(TensorError):
    """Input outside the mathematical domain of the operation."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


class TapeError(TensorError):
    """Gradient tape misuse (non-scalar root, double backward, ...)."""


_grad_enabled: bool = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / sampling paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if arr.size and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


def _freeze(arr: np.ndarray, copy: bool = False) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags.c_contiguous:
        # ascontiguousarray would promote 0-d arrays to 1-d; 0-d counts as
        # contiguous, so this branch never sees one.
        arr = np.ascontiguousarray(arr)
    if arr.flags.writeable:
        # Views and caller-owned arrays are copied so freezing never
        # mutates somebody else's flags; fresh op outputs freeze in place.
        if copy or arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array plus optional participation in the gradient tape.

    ``data`` is a read-only, row-major float64 array. ``grad`` holds the
    accumulated gradient after :func:`backward` for leaves created with
    ``requires_grad=True``; all other mutation is rebinding, never
    in-place writes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _freeze(np.asarray(values, dtype=np.float64), copy=True)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable,
                 what: str) -> "Tensor":
        _check_finite(data, what)
        out = Tensor.__new__(Tensor)
        out.data = _freeze(data)
        out.grad = None
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._vjp = None
        out._consumed = False
        return out

    def __repr__(self) -> str:
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad_flag})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape ---------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be a 0-d tensor produced by taped operations. The tape is
    consumed: a second call on the same graph raises :class:`TapeError`
    until the forward pass is rebuilt.
    """
    if loss.shape != ():
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward() already called on this graph; rebuild the forward pass")
    if loss._vjp is None and not loss.requires_grad:
        raise TapeError("loss does not depend on any requires_grad tensor")

    # Reverse topological order via iterative post-order DFS.
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid, 0) == 0:
            if node._consumed:
                raise TapeError("graph shares nodes with an already-consumed tape")
            state[nid] = 1
            for p in node._parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if state[nid] == 1:
                state[nid] = 2
                order.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            # Leaf: accumulate into the public grad field.
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    # Consume the tape.
    for node in order:
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


# -- shape plumbing -----------------------------------------------------------


def _binary_out_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(
        f"{op}: shapes {a.shape} and {b.shape} must be equal or scalar-with-tensor")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


# -- elementwise and binary ops -----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_out_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_out_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_out_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor._from_op(ad * bd, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_out_shape(a, b, "div")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return Tensor._from_op(out, (a, b), vjp, "div")


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return Tensor._from_op(-a.data, (a,), vjp, "neg")


def square(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (2.0 * ad * g,)

    return Tensor._from_op(ad * ad, (a,), vjp, "square")


def sqrt(a: Tensor) -> Tensor:
    if a.data.size and np.any(a.data < 0.0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.data)

    def vjp(g):
        # Subgradient 0 at exactly zero keeps zero-variance directions
        # noise-free instead of producing Inf * 0.
        return (np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0) * g,)

    return Tensor._from_op(out, (a,), vjp, "sqrt")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def vjp(g):
        return (out * g,)

    return Tensor._from_op(out, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    if a.data.size and np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return Tensor._from_op(np.log(ad), (a,), vjp, "log")


def softplus(a: Tensor) -> Tensor:
    z = a.data
    # Stable form: log1p(exp(-|z|)) + max(z, 0) never overflows.
    out = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)

    def vjp(g):
        sig = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (sig * g,)

    return Tensor._from_op(out, (a,), vjp, "softplus")


def absval(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (np.sign(ad) * g,)

    return Tensor._from_op(np.abs(ad), (a,), vjp, "abs")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise DomainError(f"clip bounds out of order: [{lo}, {hi}]")
    ad = a.data
    inside = (ad > lo) & (ad < hi)

    def vjp(g):
        return (np.where(inside, g, 0.0),)

    return Tensor._from_op(np.clip(ad, lo, hi), (a,), vjp, "clip")


def gelu(a: Tensor) -> Tensor:
    z = a.data
    phi = 0.5 * (1.0 + _erf(z * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * z * z)
        return ((phi + z * pdf) * g,)

    return Tensor._from_op(z * phi, (a,), vjp, "gelu")


# -- reductions and shape ops ---------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g), dtype=np.float64),)

    return Tensor._from_op(np.asarray(a.data.sum()), (a,), vjp, "sum")


def tmean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    shape, n = a.shape, a.size

    def vjp(g):
        return (np.full(shape, float(g) / n, dtype=np.float64),)

    return Tensor._from_op(np.asarray(a.data.mean()), (a,), vjp, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return Tensor._from_op(a.data.reshape(shape), (a,), vjp, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,), vjp, "transpose")


# -- matmul ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product covering matrix-matrix, matrix-vector, and inner products."""
    ad, bd = a.data, b.data
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul operands must be 1-D or 2-D, got {a.shape} @ {b.shape}")
    inner_a = ad.shape[-1]
    inner_b = bd.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = ad @ bd

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        return float(g) * bd, float(g) * ad

    return Tensor._from_op(out, (a, b), vjp, "matmul")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim not in (1, 2):
        raise ShapeError(f"log_softmax expects vector or matrix, got {a.shape}")
    z = a.data
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), vjp, "log_softmax")


# -- composites -----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for single inputs or batches.

    The bias broadcast is expressed with explicit ops (ones-vector outer
    product) so the gradient path stays within the audited rules.
    """
    if x.ndim == 1:
        out = matmul(weight, x)
        if bias is not None:
            out = add(out, bias)
        return out
    if x.ndim == 2:
        out = matmul(x, transpose(weight))
        if bias is not None:
            rows = Tensor(np.ones((x.shape[0], 1)))
            out = add(out, matmul(rows, reshape(bias, (1, bias.size))))
        return out
    raise ShapeError(f"linear expects vector or batch matrix, got {x.shape}")


def randn(rng: Rng, shape) -> Tensor:
    """Standard-normal tensor from the seeded stream (never on the tape)."""
    return Tensor(rng.normal(tuple(int(s) for s in shape)))

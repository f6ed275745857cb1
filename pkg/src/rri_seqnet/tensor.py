"""Dense tensors with tape-based reverse-mode differentiation.

Every tensor wraps a C-contiguous numpy array. Operations executed while
gradient recording is enabled attach a :class:`Node` to their output; the
nodes reachable from a scalar loss form a :class:`Tape` which ``backward``
walks in reverse execution order.
"""

from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

DEBUG = os.environ.get("RRI_SEQNET_DEBUG", "") not in ("", "0")

_state = threading.local()
_counter = itertools.count()

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rules."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (evaluation paths)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_counter)


class Tensor:
    """A real array with optional gradient and a link into the tape."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    # -- construction -----------------------------------------------------
    @staticmethod
    def from_op(op: str, data: np.ndarray, inputs: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        """Wrap an op result, recording it when any input needs gradients.

        ``backward_fn(g)`` receives the output gradient and returns one
        array (or ``None``) per input, each shaped like that input.
        """
        if DEBUG and not np.all(np.isfinite(data)):
            finite_in = all(np.all(np.isfinite(t.data)) for t in inputs)
            if finite_in:
                raise FloatingPointError(f"{op}: non-finite output from finite inputs")
        out = Tensor(data)
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node = Node(op, tuple(inputs), backward_fn)
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff entry point ---------------------------------------------
    def backward(self, grad: ArrayLike | None = None) -> None:
        backward(self, grad)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def softplus(self):
        return softplus(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(a, b) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise binary ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor.from_op("div", out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor.from_op("pow", ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics, ndim >= 2)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op("matmul", ad @ bd, (a, b), bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[0],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor.from_op("affine", out, inputs, bw)


# -- elementwise unary ----------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor.from_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return Tensor.from_op("silu", ad * s, (a,), lambda g: (g * s * (1.0 + ad * (1.0 - s)),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor.from_op("softplus", _softplus(ad), (a,), lambda g: (g * _sigmoid(ad),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0
    return Tensor.from_op("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op("softmax", s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op("log_softmax", out, (a,), bw)


# -- reductions -----------------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand(g: np.ndarray, axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor.from_op(
        "sum", np.asarray(out), (a,), lambda g: (np.broadcast_to(_expand(g, axes, keepdims), shape).copy(),)
    )


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return Tensor.from_op(
        "mean", np.asarray(out), (a,), lambda g: (np.broadcast_to(_expand(g, axes, keepdims) / n, shape).copy(),)
    )


def max_(a: Tensor, axis: int | None = None, keepdims=False) -> Tensor:
    """Maximum along one axis (or all); gradient goes to the first maximal index."""
    ad = a.data
    if axis is None:
        flat = ad.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def bw_all(g):
            gi = np.zeros(flat.shape, dtype=ad.dtype)
            gi[idx] = np.asarray(g).reshape(-1)[0]
            return (gi.reshape(ad.shape),)

        return Tensor.from_op("max", np.asarray(out).reshape((1,) * ad.ndim if keepdims else ()), (a,), bw_all)
    axis = axis % ad.ndim
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, idx, axis=axis)

    def bw(g):
        gi = np.zeros_like(ad)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gi, idx, gk, axis=axis)
        return (gi,)

    return Tensor.from_op("max", out if keepdims else np.squeeze(out, axis), (a,), bw)


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return Tensor.from_op("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        "transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),)
    )


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing (ints and slices); returns a copy."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        gi = np.zeros(shape, dtype=dtype)
        gi[idx] = g
        return (gi,)

    return Tensor.from_op("slice", np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)) for i in range(len(tensors))
        )

    return Tensor.from_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> Tuple[Tensor, ...]:
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {a.shape[axis]} of {a.shape}")
    bounds = np.cumsum([0] + list(sizes))
    out = []
    for i in range(len(sizes)):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
        out.append(getitem(a, tuple(sl)))
    return tuple(out)


# -- tape and backward ----------------------------------------------------

class Tape:
    """Ordered record of the ops reachable from one output.

    ``nodes`` is in execution order, so every op follows the ops that
    produced its inputs.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, grad: ArrayLike | None = None) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Leaf grads accumulate across calls; use :func:`zero_grads` to reset.
    """
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad = np.ones(loss.shape, dtype=loss.dtype)
    grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = grad if loss.grad is None else loss.grad + grad
        return
    tape = Tape.from_output(loss)
    # each node belongs to exactly one output tensor, so gradients are keyed by node
    pending: dict[int, np.ndarray] = {id(loss.node): grad}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp.node)
                pending[key] = gi if key not in pending else pending[key] + gi
    return None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# -- numerical gradient verification ------------------------------------

def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences for ``f`` at ``x``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(Tensor(x0.copy())).item()
            flat[i] = orig - h
            fm = f(Tensor(x0.copy())).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    return _rel_err(analytic, numeric)


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check` but over tensors captured by ``f`` (perturbed in place).

    ``max_coords`` limits the check to a random subset of coordinates per tensor.
    """
    zero_grads(params)
    f().backward()
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = analytic.reshape(-1)[coords]
        n = np.zeros(len(coords))
        with no_grad():
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                n[j] = (fp - fm) / (2 * h)
        worst = max(worst, _rel_err(a, n))
    zero_grads(params)
    return worst


def grad_check_screened(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                        max_coords: int | None = None, rng: np.random.Generator | None = None,
                        kink_tol: float = 1e-4) -> Tuple[float, int, int]:
    """Gradient check for piecewise-smooth ``f`` (ReLU, max-pool).

    Each coordinate is differenced at ``h`` and ``h/2``. If the two estimates
    disagree by more than ``kink_tol`` the interval straddles a kink, so the
    coordinate is skipped. Returns ``(max rel err, n_checked, n_skipped)``.
    """
    zero_grads(params)
    f().backward()
    rng = rng or np.random.default_rng(0)
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        with no_grad():
            for i in coords:
                est = []
                for step in (h, h / 2):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = f().item()
                    flat[i] = orig - step
                    fm = f().item()
                    flat[i] = orig
                    est.append((fp - fm) / (2 * step))
                if abs(est[0] - est[1]) > kink_tol * max(1.0, abs(est[1])):
                    skipped += 1
                    continue
                checked += 1
                worst = max(worst, _rel_err(analytic[i:i + 1], np.array([est[0]])))
    zero_grads(params)
    return worst, checked, skipped

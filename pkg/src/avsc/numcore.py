"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Only the operations the model needs are provided. Every op checks shapes
eagerly and records a closure that maps the output gradient to one gradient
per parent. ``backward`` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "ShapeError",
    "fd_floor",
    "DomainError",
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "sigmoid",
    "softmax_rows",
    "relu",
    "log",
    "clamp",
    "mean",
    "sum_",
    "transpose",
    "permute",
    "reshape",
    "concat",
    "row_select",
    "depthwise_conv2d",
    "backward",
    "no_grad",
    "zero_grad",
    "grad_check",
    "GradCheckReport",
]


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Dense float64 array with an optional gradient and its tape links."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: BackwardFn | None = None,
        _op: str = "",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (evaluation passes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    # op outputs are fresh arrays; skip the defensive copy in __init__
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = needs
    out.grad = None
    out._parents = parents if needs else ()
    out._backward = fn if needs else None
    out._op = op
    out._consumed = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), fn, "mul")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    # two-branch form: exp never sees a positive argument
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError(f"log: non-positive input (min {x.data.min()!r})")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted per row."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), fn, "softmax")


# --- reductions and shape ops ----------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return scale(sum_(x, axis=axes, keepdims=keepdims), 1.0 / n)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ndim = xs[0].ndim
    ax = axis % ndim
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), fn, "concat")


def row_select(w: Tensor, index) -> Tensor:
    """Gather rows of ``w`` (first axis) by an integer index array of any shape."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -w.shape[0] or idx.max() >= w.shape[0]):
        raise ShapeError(f"row_select: index out of range for shape {w.shape}")

    def fn(g):
        out = np.zeros_like(w.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(w.data[idx], (w,), fn, "row_select")


# --- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # shared weight matrix: fold the batch axes into one product
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), fn, "matmul")


@functools.lru_cache(maxsize=32)
def _shift_stack(H: int, W: int, kh: int, kw: int) -> np.ndarray:
    """0/1 matrices ``S[a*kw+b, p*HW+q] = 1`` when output pixel p reads input q at tap (a, b)."""
    ph, pw = kh // 2, kw // 2
    S = np.zeros((kh * kw, H * W, H * W))
    for a in range(kh):
        for b in range(kw):
            for i in range(H):
                for j in range(W):
                    si, sj = i + a - ph, j + b - pw
                    if 0 <= si < H and 0 <= sj < W:
                        S[a * kw + b, i * W + j, si * W + sj] = 1.0
    S = S.reshape(kh * kw, H * W * H * W)
    S.setflags(write=False)
    return S


def depthwise_conv2d(x: Tensor, k: Tensor) -> Tensor:
    """Per-channel 2-D convolution with zero 'same' padding.

    ``x`` is ``[M, H, W, C]`` and ``k`` is ``[kh, kw, C]`` with odd kernel sides.
    """
    if x.ndim != 4 or k.ndim != 3 or x.shape[3] != k.shape[2]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {k.shape}")
    kh, kw, _ = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: kernel sides must be odd, got {k.shape}")
    M, H, W, C = x.shape
    # conv as a per-channel [HW x HW] operator assembled from shift matrices
    shifts = _shift_stack(H, W, kh, kw)
    op = (k.data.reshape(kh * kw, C).T @ shifts).reshape(C, H * W, H * W)
    xc = np.ascontiguousarray(np.transpose(x.data.reshape(M, H * W, C), (2, 1, 0)))
    out = np.transpose(np.matmul(op, xc), (2, 1, 0)).reshape(M, H, W, C)

    def fn(g):
        gc = np.ascontiguousarray(np.transpose(g.reshape(M, H * W, C), (2, 1, 0)))
        gx = np.transpose(np.matmul(np.swapaxes(op, 1, 2), gc), (2, 1, 0)).reshape(x.shape)
        gop = np.matmul(gc, np.swapaxes(xc, 1, 2)).reshape(C, H * W * H * W)
        gk = (gop @ shifts.T).T.reshape(k.shape)
        return gx, gk

    return _make(out, (x, k), fn, "dwconv")


# --- tape replay -----------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Leaf gradients accumulate across calls (reset with :func:`zero_grad`); a
    given loss graph can only be replayed once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: this graph was already backpropagated; rebuild it with a new forward pass")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# --- finite-difference checking --------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    worst: dict[str, tuple[float, float]] = field(default_factory=dict)
    floor: float = 1e-8

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max rel err {self.max_error:.3e} (tol {self.tol:g})"]
        for name, err in self.errors.items():
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def fd_floor(value: float, h: float = 1e-5) -> float:
    """Smallest gradient a central difference of a loss near ``value`` resolves.

    The difference quotient carries a rounding error of roughly
    ``eps * |value| / h``, about ``2e-11 * |value|`` at ``h = 1e-5``. This
    returns ``1e-6 * max(1, |value|)`` (scaled for other ``h``). Used as the
    ``grad_check`` floor with ``tol = 1e-4``, entries below it are held to an
    absolute error of ``1e-10 * |value|``, about four times that rounding error.
    """
    return 1e-6 * max(1.0, abs(float(value))) * (1e-5 / h)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` to central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the report
    keeps the maximum per parameter. ``max_entries`` subsamples large tensors.
    See :func:`fd_floor` for choosing ``floor`` on large composite losses.
    """
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    zero_grad(params.values())
    f0 = f()
    backward(f0)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    worst: dict[str, tuple[float, float]] = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_err, worst_pair = 0.0, (0.0, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            if err > worst_err:
                worst_err, worst_pair = err, (ana, num)
        errors[name] = worst_err
        worst[name] = worst_pair
    return GradCheckReport(errors=errors, tol=tol, worst=worst, floor=floor)

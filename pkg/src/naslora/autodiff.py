"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Single-threaded by design. One ``GradTape`` is active at a time; operations
executed while it is active append one record each, and ``backward`` replays
the records in reverse execution order (a valid topological order by
construction). Tensors produced while no tape is active track nothing, which
makes inference passes allocation-light.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError, ValueCheckError

Array = np.ndarray


def _as_f64(values) -> Array:
    # order="C" (not ascontiguousarray) so 0-d scalars keep their shape
    return np.asarray(values, dtype=np.float64, order="C")


class Tensor:
    """N-dimensional float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Public constructor: validates finiteness of the supplied values."""
    t = Tensor(data, requires_grad=requires_grad)
    if not np.isfinite(t.data).all():
        raise NonFiniteError("tensor() given non-finite values")
    return t


# One record per executed op: (inputs, output, backward callable).
# The callable maps the output adjoint to one adjoint (or None) per input.
_BackwardFn = Callable[[Array], Sequence[Array | None]]
_TapeNode = tuple[tuple[Tensor, ...], Tensor, _BackwardFn]

_TAPE_STACK: list["GradTape"] = []
_LAST_TAPE: "GradTape | None" = None


class GradTape:
    """Ordered record of executed operations for one training context.

    Replaying the tape in reverse visits every recorded node exactly once;
    ``clear`` releases all recorded nodes so the tape can be reused.
    A second ``backward`` without an intervening ``clear`` is an error.
    """

    def __init__(self):
        self._nodes: list[_TapeNode] = []
        self._consumed = False
        self.replayed = 0

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _LAST_TAPE
        if not _TAPE_STACK or _TAPE_STACK[-1] is not self:
            raise TapeError("GradTape context exited out of order")
        _TAPE_STACK.pop()
        _LAST_TAPE = self

    @property
    def num_recorded(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()
        self._consumed = False
        self.replayed = 0

    def backward(self, loss: Tensor) -> None:
        backward(loss, tape=self)


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(inputs: tuple[Tensor, ...], out_data: Array, fn: _BackwardFn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((inputs, out, fn))
    return out


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Seed the scalar loss adjoint with 1 and replay the tape in reverse.

    Every tracked tensor that contributed to the loss receives its adjoint in
    ``.grad``; untracked tensors receive none.
    """
    if tape is None:
        tape = active_tape() or _LAST_TAPE
    if tape is None or tape.num_recorded == 0:
        raise TapeError("backward() needs a nonempty gradient tape")
    if tape._consumed:
        raise TapeError("backward() called twice on the same tape; clear() it first")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    loss.grad = np.ones_like(loss.data)
    visits = 0
    for inputs, out, fn in reversed(tape._nodes):
        visits += 1
        og = out.grad
        if og is None:
            continue
        if not np.isfinite(og).all():
            raise NonFiniteError("NaN/Inf adjoint detected during backward")
        grads = fn(og)
        for t, g in zip(inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
    tape.replayed = visits
    tape._consumed = True


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record((a, b), out, lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((a,), a.data * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record((a,), a.data + c, lambda g: (g,))


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a single-element tensor (graph scalar)."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scalar operand has shape {s.shape}")
    sv = float(s.data.reshape(())[()])
    ad = a.data

    def bw(g: Array):
        return g * sv, np.array(np.sum(g * ad)).reshape(s.shape)

    return _record((a, s), ad * sv, bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log: domain error, operand has values <= 0")
    ad = a.data
    return _record((a,), np.log(ad), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes only where unclipped."""
    ad = a.data
    mask = (ad > lo) & (ad < hi)
    return _record((a,), np.clip(ad, lo, hi), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record((a,), out, lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-form Gaussian error linear unit."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def bw(g: Array):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _record((a,), 0.5 * x * (1.0 + t), bw)


# ---------------------------------------------------------------------------
# reductions

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record((a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _record((a,), np.array(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def sum_spatial(a: Tensor) -> Tensor:
    """Sum over the trailing two axes."""
    if a.ndim < 2:
        raise ShapeError(f"sum_spatial: needs >= 2 axes, got shape {a.shape}")
    shape = a.shape

    def bw(g: Array):
        return (np.broadcast_to(g[..., None, None], shape).copy(),)

    return _record((a,), a.data.sum(axis=(-2, -1)), bw)


# ---------------------------------------------------------------------------
# shape manipulation and indexing

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from e
    return _record((a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _record((a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Index-select along one axis. Indices need not be unique."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def bw(g: Array):
        z = np.zeros(shape)
        np.add.at(np.moveaxis(z, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _record((a,), np.take(a.data, idx, axis=axis), bw)


def put(a: Tensor, indices, values: Tensor, axis: int) -> Tensor:
    """Copy of ``a`` with slices along ``axis`` replaced by ``values``.

    Indices must be unique (each slice written once).
    """
    idx = np.asarray(indices, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("put: duplicate indices")
    out = a.data.copy()
    np.moveaxis(out, axis, 0)[idx] = np.moveaxis(values.data, axis, 0)

    def bw(g: Array):
        ga = g.copy()
        np.moveaxis(ga, axis, 0)[idx] = 0.0
        gv = np.moveaxis(np.moveaxis(g, axis, 0)[idx], 0, axis)
        return ga, gv

    return _record((a, values), out, bw)


def tile_batch(a: Tensor, n: int) -> Tensor:
    """Prepend a batch axis of extent n by repetition."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _record((a,), out, lambda g: (g.sum(axis=0),))


# ---------------------------------------------------------------------------
# linear maps

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g: Array):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record((a, b), ad @ bd, bw)


def linear_lastdim(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., d] = sum_c x[..., c] * w[d, c] (+ b[d])."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear_lastdim: shapes {x.shape} and {w.shape} incompatible")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear_lastdim: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data

    def bw(g: Array):
        gf = g.reshape(-1, g.shape[-1])
        xf = xd.reshape(-1, xd.shape[-1])
        dw = gf.T @ xf if w.requires_grad else None
        db = gf.sum(axis=0) if b is not None and b.requires_grad else None
        grads = [g @ wd, dw]
        if b is not None:
            grads.append(db)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record(inputs, out, bw)


def add_bias_channels(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1 of a 4-D tensor."""
    if x.ndim != 4 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias_channels: shapes {x.shape} and {b.shape} incompatible")
    return _record((x, b), x.data + b.data[None, :, None, None],
                   lambda g: (g, g.sum(axis=(0, 2, 3))))


# ---------------------------------------------------------------------------
# softmax family

def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stable softmax over the trailing axis (max subtraction)."""
    x = a.data
    ex = np.exp(x - x.max(axis=-1, keepdims=True))
    out = ex / ex.sum(axis=-1, keepdims=True)

    def bw(g: Array):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record((a,), out, bw)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g: Array):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record((a,), out, bw)


def gather_lastdim(a: Tensor, indices) -> Tensor:
    """out[...] = a[..., indices[...]]; one element picked per row."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"gather_lastdim: index shape {idx.shape} != {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError("gather_lastdim: index out of range")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.shape

    def bw(g: Array):
        z = np.zeros(shape)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return (z,)

    return _record((a,), out, bw)


# ---------------------------------------------------------------------------
# normalization

def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization across axis 1 (channels), affine per channel."""
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm_channels: shapes {x.shape}, {gamma.shape}, {beta.shape} incompatible")
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    gr = gamma.data.reshape(bshape)
    br = beta.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = xc * inv
    out = xn * gr + br
    axes = tuple(i for i in range(x.ndim) if i != 1)

    def bw(g: Array):
        gh = g * gr
        dx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xn * (gh * xn).mean(axis=1, keepdims=True))
        dgamma = (g * xn).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _record((x, gamma, beta), out, bw)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5,
               coords: Sequence[tuple[int, ...]] | None = None) -> float:
    """Compare reverse-mode and central-difference gradients of f at point.

    Returns the maximum over checked coordinates of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``point`` must require gradients; ``f`` must produce a scalar. When
    ``coords`` is given, only those coordinates are probed (full check
    otherwise). Not valid at subgradient points (max-pool ties).
    """
    if not point.requires_grad:
        raise ValueCheckError("grad_check: point must require gradients")
    point.grad = None
    with GradTape() as tape:
        out = f(point)
    if out.size != 1:
        raise ShapeError(f"grad_check: f returned shape {out.shape}, expected scalar")
    backward(out, tape=tape)
    if point.grad is None:
        raise ValueCheckError("grad_check: f does not depend on point")
    analytic = point.grad.copy()
    tape.clear()

    if coords is None:
        coords = list(np.ndindex(*point.shape)) if point.ndim else [()]
    worst = 0.0
    base = point.data
    for c in coords:
        keep = base[c]
        base[c] = keep + eps
        up = f(point).item()
        base[c] = keep - eps
        down = f(point).item()
        base[c] = keep
        numeric = (up - down) / (2.0 * eps)
        a = float(analytic[c])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    point.grad = analytic
    return worst

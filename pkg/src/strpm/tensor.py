"""Dense 4-D tensors with define-by-run reverse-mode differentiation.

Every tensor is an ``(n, c, h, w)`` float64 array (reductions return 0-d
scalars). Operations record themselves on the innermost active :class:`Tape`;
outside a tape they run as plain numpy and build no graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of operations; creation order is a topological order.

    Used as a context manager. Tapes nest per thread; ops record on the
    innermost one.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        out._tape = self
        out._index = len(self.records)
        out.requires_grad = True
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {loss._index: np.ones_like(loss.data)}
        for index in range(loss._index, -1, -1):
            g = pending.pop(index, None)
            if g is None:
                continue
            out, inputs, backward_fn = self.records[index]
            for inp, gi in zip(inputs, backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    prev = pending.get(inp._index)
                    pending[inp._index] = gi if prev is None else prev + gi
                elif inp._tape is None:
                    inp.grad = np.array(gi, dtype=DTYPE) if inp.grad is None else inp.grad + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on."""
    if loss._tape is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


# --------------------------------------------------------------------------
# FLOP accounting

class FlopCounter:
    """Accumulates FLOPs of every op executed while active (thread-local)."""

    def __init__(self):
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        _local.flops = self
        return self

    def __exit__(self, *exc) -> None:
        _local.flops = None


def _count(n: int) -> None:
    counter = getattr(_local, "flops", None)
    if counter is not None:
        counter.total += int(n)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# construction

def make_tensor(shape: Sequence[int], fill_or_data=0.0, requires_grad: bool = False) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s <= 0 for s in shape):
        raise ValueError(f"shape must be four positive ints (n, c, h, w), got {shape}")
    if np.isscalar(fill_or_data):
        return Tensor(np.full(shape, fill_or_data, dtype=DTYPE), requires_grad)
    data = np.asarray(fill_or_data, dtype=DTYPE).ravel()
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"data has {data.size} values, shape {shape} needs {expected}")
    return Tensor(data.reshape(shape).copy(), requires_grad)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))


# --------------------------------------------------------------------------
# element-wise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _count(a.size)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "hadamard")
    _count(a.size)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "hadamard":
        return hadamard(a, b)
    raise ValueError(f"unknown element-wise op {kind!r}")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    _count(a.size)
    return _emit(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    _count(a.size)
    return _emit(a.data + s, (a,), lambda g: (g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _count(x.size)
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    _count(x.size)
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def log(x: Tensor) -> Tensor:
    _count(x.size)
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    _count(x.size)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --------------------------------------------------------------------------
# structural

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    n, _, h, w = xs[0].shape
    for x in xs[1:]:
        if x.data.ndim != 4 or (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: {x.shape} incompatible with {xs[0].shape}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    data = np.concatenate([x.data for x in xs], axis=1)

    def _back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _emit(data, tuple(xs), _back)


def concat_batch(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_batch needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    for x in xs[1:]:
        if x.shape[1:] != xs[0].shape[1:]:
            raise ValueError(f"concat_batch: {x.shape} incompatible with {xs[0].shape}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    data = np.concatenate([x.data for x in xs], axis=0)

    def _back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _emit(data, tuple(xs), _back)


# --------------------------------------------------------------------------
# reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _count(x.size)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    _count(x.size)
    shape, n = x.shape, x.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared element-wise differences, as a 0-d tensor."""
    _check_same_shape(a, b, "mse")
    _count(3 * a.size)
    diff = a.data - b.data
    n = diff.size

    def _back(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return _emit(np.asarray(np.mean(diff * diff)), (a, b), _back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean, ``(n, c, h, w) -> (n, c, 1, 1)``."""
    _count(x.size)
    n, c, h, w = x.shape
    area = h * w
    return _emit(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / area, (n, c, h, w)),),
    )


# --------------------------------------------------------------------------
# convolution

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``weight`` is ``(out_c, in_c, kh, kw)``."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"conv2d: input has {c} channels, weights expect {ic}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: output size {oh}x{ow} < 1 for input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (n, c, oh, ow, kh, kw) strided view
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    _count(2 * n * oc * oh * ow * ic * kh * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
        _count(n * oc * oh * ow)
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, _back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is ``(in_c, out_c, kh, kw)``.

    With bias omitted this is the exact adjoint of :func:`conv2d` using the
    same weight array, stride and padding.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv_transpose2d expects a 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weights expect {ic}")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"conv_transpose2d: output size {oh}x{ow} < 1")
    wd = weight.data
    xd = x.data
    cols = np.tensordot(xd, wd, axes=([1], [0]))  # (n, h, w, oc, kh, kw)
    full = np.zeros((n, oc, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    _count(2 * n * ic * h * w * oc * kh * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, oc, 1, 1)
        _count(n * oc * oh * ow)
    out = np.ascontiguousarray(out)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    full_shape = full.shape

    def _back(g):
        gfull = np.zeros(full_shape, dtype=DTYPE)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :w]
        gx = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, _back)


# --------------------------------------------------------------------------
# gradient checking

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``x`` is perturbed in place, so it may be a parameter that ``f`` closes
    over. ``indices`` restricts the check to those flat positions.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    was_leaf_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {y.shape}")
    tape.backward(y)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x).item()
        flat[i] = orig - eps
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2 * eps)
        a = aflat[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    x.requires_grad = was_leaf_grad
    x.grad = None
    return worst

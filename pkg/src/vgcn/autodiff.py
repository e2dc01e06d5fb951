"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record themselves when a :class:`Tape` is active on the
current thread and at least one input requires a gradient.  Outside a tape
every tensor is a plain immutable value, which is what Monte Carlo
evaluation uses.

Broadcasting is deliberately narrow: equal shapes, a scalar operand, or an
operand whose shape is a suffix of the other's (leading batch dimensions).
Per-channel arithmetic on ``(B, C, T, N)`` layouts goes through
:func:`channel_affine` and :func:`batch_norm` instead.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ConfigError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Entry:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Ordered record of differentiable operations, confined to one thread.

    Use as a context manager::

        with Tape():
            loss = f(w)
            backward(loss)
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        if threading.get_ident() != self._thread:
            raise ContractError("a Tape can only be used on the thread that created it")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, inputs: tuple, output: "Tensor", backward: Callable) -> None:
        output.node_id = len(self.entries)
        output._tape = self
        self.entries.append(_Entry(op, inputs, output, backward))

    def reset(self) -> None:
        for entry in self.entries:
            entry.output.node_id = None
            entry.output._tape = None
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class Tensor:
    """N-dimensional float64 array that may participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None

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
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        raise TypeError("only division by a Python scalar is supported")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, copy=False)


def _result(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data, copy=False)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers


def _is_scalar(shape: tuple) -> bool:
    return len(shape) == 0 or shape == (1,)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _is_scalar(b):
        return a
    if _is_scalar(a):
        return b
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if _is_scalar(shape):
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------------------
# binary arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result("scale", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result("add_scalar", x.data + float(c), (x,), lambda g: (g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast as batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    try:
        broadcast_shape(a.shape[:-2], b.shape[:-2])
    except ShapeError:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result("matmul", np.matmul(ad, bd), (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at 0 is 0
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result("softplus", _softplus(xd), (x,), lambda g: (g * _stable_sigmoid(xd),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if np.any(xd <= 0):
        raise ContractError("log of a non-positive value")
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ContractError("sqrt of a negative value")
    y = np.sqrt(x.data)
    return _result("sqrt", y, (x,), lambda g: (0.5 * g / y,))


def identity(x) -> Tensor:
    return as_tensor(x)


_UNARY = {"relu": relu, "tanh": tanh, "softplus": softplus, "exp": exp,
          "sigmoid": sigmoid, "identity": identity}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(x, f: str, y=None, *, c: float | None = None) -> Tensor:
    """Apply a named elementwise function.

    Unary names: relu, tanh, softplus, exp, sigmoid, identity.  Binary
    names (``y`` required): add, mul, sub.  ``scale`` multiplies by ``c``.
    """
    if f in _UNARY:
        return _UNARY[f](x)
    if f in _BINARY:
        if y is None:
            raise ConfigError(f"elementwise {f!r} needs a second operand")
        return _BINARY[f](x, y)
    if f == "scale":
        if c is None:
            raise ConfigError("elementwise 'scale' needs c")
        return scale(x, c)
    raise ConfigError(f"unknown elementwise function {f!r}")


# ---------------------------------------------------------------------------
# reductions and normalisations


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax_axis(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), backward)


softmax = softmax_axis


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result("log_softmax", y, (x,),
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
        return (np.broadcast_to(g, shape),)

    return _result("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def batch_norm(x, gamma, beta, eps: float = 1e-5):
    """Training-mode batch normalisation over every axis except axis 1.

    Returns ``(y, batch_mean, batch_var)`` where the statistics are plain
    arrays (biased variance) for the caller's running averages.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm expects ({c},) scale/shift, got {gamma.shape} and {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data
    y = xhat * gd.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxh = g * gd.reshape(bshape)
        gx = (inv.reshape(bshape) / m) * (
            m * gxh - gxh.sum(axis=axes).reshape(bshape)
            - xhat * (gxh * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, gg, gb

    return _result("batch_norm", y, (x, gamma, beta), backward), mu, var


def channel_affine(x, scale_, shift) -> Tensor:
    """``x * scale[c] + shift[c]`` along axis 1."""
    x, scale_, shift = as_tensor(x), as_tensor(scale_), as_tensor(shift)
    c = x.shape[1]
    if scale_.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_affine expects ({c},) parameters, got {scale_.shape} and {shift.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd, sd = x.data, scale_.data
    y = xd * sd.reshape(bshape) + shift.data.reshape(bshape)
    return _result("channel_affine", y, (x, scale_, shift),
                   lambda g: (g * sd.reshape(bshape), (g * xd).sum(axis=axes), g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result("reshape", y, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def select(x, index: int, axis: int) -> Tensor:
    """Pick one position along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _result("select", np.take(x.data, index, axis=axis), (x,), backward)


def slice_axis(x, axis: int, start: int | None = None, stop: int | None = None,
               step: int | None = None) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop, step)
    sl = tuple(sl)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _result("slice", x.data[sl], (x,), backward)


# ---------------------------------------------------------------------------
# temporal convolution


def temporal_conv(x, kernel, stride: int = 1) -> Tensor:
    """Convolve every node's time series independently.

    ``x`` is ``(C_in, T, N)`` or ``(B, C_in, T, N)``; ``kernel`` is
    ``(C_out, C_in, K_t)`` with odd ``K_t``.  Zero padding of ``(K_t-1)/2``
    frames on both ends gives ``T' = ceil(T / stride)``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (C_out, C_in, K_t), got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"temporal kernel size must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if x.ndim not in (3, 4) or x.shape[-3] != c_in:
        raise ShapeError(f"temporal_conv input {x.shape} does not match kernel {kernel.shape}")
    t = x.shape[-2]
    if t < 1:
        raise ShapeError("temporal_conv needs at least one frame")
    pad = (k - 1) // 2
    t_out = -(-t // stride)
    widths = [(0, 0)] * x.ndim
    widths[-2] = (pad, pad)
    xp = np.pad(x.data, widths)
    span = stride * (t_out - 1) + 1
    kd = kernel.data
    windows = [xp[..., j:j + span:stride, :] for j in range(k)]
    out = np.zeros(x.shape[:-3] + (c_out, t_out, x.shape[-1]))
    for j in range(k):
        out += np.einsum("oc,...ctn->...otn", kd[:, :, j], windows[j])

    def backward(g):
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for j in range(k):
            if g.ndim == 4:
                gk[:, :, j] = np.einsum("botn,bctn->oc", g, windows[j])
            else:
                gk[:, :, j] = np.einsum("otn,ctn->oc", g, windows[j])
            gxp[..., j:j + span:stride, :] += np.einsum("oc,...otn->...ctn", kd[:, :, j], g)
        return gxp[..., pad:pad + t, :], gk

    return _result("temporal_conv", out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing ``.grad`` arrays.  The tape that
    recorded ``loss`` is reset afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss.node_id is None or loss.node_id >= len(tape.entries) \
            or tape.entries[loss.node_id].output is not loss:
        raise ContractError("loss is not attached to an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, list] = {}
    for entry in reversed(tape.entries[: loss.node_id + 1]):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node_id is None:
                slot = leaves.get(id(t))
                if slot is None:
                    leaves[id(t)] = [t, np.array(gi, dtype=np.float64)]
                else:
                    slot[1] = slot[1] + gi
            else:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    for t, g in leaves.values():
        g = np.array(np.broadcast_to(g, t.shape))
        t.grad = g if t.grad is None else t.grad + g
    tape.reset()


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-3, tol: float = 1e-4,
               floor: float = 1.0) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    The per-element error is ``|a - n| / max(|a|, |n|, floor)``; the default
    floor of 1 keeps elements with near-zero gradient from reporting the
    finite-difference truncation error as a huge relative error.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    with Tape():
        out = f(leaf)
        backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
    return GradCheckReport(err, bool(err <= tol), analytic, numeric)

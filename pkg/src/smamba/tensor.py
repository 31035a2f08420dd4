"""Minimal dense reverse-mode autodiff engine on top of numpy.

Every differentiable operation executed while at least one input requires a
gradient appends a record to the active :class:`GradientTape`.  Calling
:meth:`GradientTape.backward` replays the adjoints in reverse execution order
and consumes the tape.

Broadcasting is intentionally narrow: two operands must either have the same
shape, one of them must be a scalar, or the smaller shape must be a suffix of
the larger one (leading-batch broadcast).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import ComputationError, ContractError, DimensionError, TapeStateError

__all__ = [
    "Tensor",
    "GradientTape",
    "no_grad",
    "custom_op",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "sigmoid",
    "silu",
    "softplus",
    "square",
    "absolute",
    "layer_norm",
    "causal_depthwise_conv1d",
    "softmax",
    "transpose",
    "reshape",
    "slice_axis",
    "concat",
    "reverse_axis",
    "reduce_mean",
    "reduce_sum",
    "finite_difference_check",
]


class Tensor:
    """Dense array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: GradientTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeStateError("tensor was not produced by a recorded operation")
        self._tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("output", "inputs", "backward_fn", "name")

    def __init__(self, output, inputs, backward_fn, name):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class GradientTape:
    """Ordered log of executed operations.

    Usable as a context manager; while active it receives every record made on
    the current thread.  A tape can be replayed exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "GradientTape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().stack
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, rec: _Record) -> None:
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        self._records.append(rec)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeStateError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
        if not self._records:
            raise TapeStateError("tape is empty")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._tape is None:
                    leaves[key] = t
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self._records.clear()
        self.consumed = True


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: list[GradientTape] = []
        self.grad_enabled = True
        self.implicit: GradientTape | None = None


_local = _ThreadState()


def _state() -> _ThreadState:
    return _local


def _active_tape() -> GradientTape:
    st = _state()
    if st.stack and not st.stack[-1].consumed:
        return st.stack[-1]
    # no explicit tape: fall back to a per-thread implicit tape
    if st.implicit is None or st.implicit.consumed:
        st.implicit = GradientTape()
    return st.implicit


@contextmanager
def no_grad():
    """Disable recording on the current thread."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ComputationError(f"{name} produced non-finite values")


def custom_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]],
) -> Tensor:
    """Wrap a numpy result as a tensor and record its adjoint.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``) per
    entry of ``inputs``.
    """
    _check_finite(name, out_data)
    out = Tensor(out_data)
    if _state().grad_enabled and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape = _active_tape()
        out.requires_grad = True
        out._tape = tape
        tape._record(_Record(out, tuple(inputs), backward_fn, name))
    return out


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def _broadcast_shape(name: str, a: tuple, b: tuple) -> tuple:
    if a == b or len(b) == 0 or (len(b) < len(a) and a[len(a) - len(b):] == b):
        return a
    if len(a) == 0 or (len(a) < len(b) and b[len(b) - len(a):] == a):
        return b
    raise DimensionError(f"{name}: shapes {a} and {b} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    if shape == ():
        return np.asarray(g.sum())
    return g


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return custom_op(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return custom_op("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return custom_op("abs", np.abs(ad), (a,), lambda g: (np.sign(ad) * g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return custom_op("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return custom_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return custom_op("silu", x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


SOFTPLUS_THRESHOLD = 20.0


def _softplus(x: np.ndarray) -> np.ndarray:
    # x + log(1 + e^-x) above the threshold so exp never overflows
    hi = np.maximum(x, SOFTPLUS_THRESHOLD)
    lo = np.minimum(x, SOFTPLUS_THRESHOLD)
    return np.where(x > SOFTPLUS_THRESHOLD, hi + np.log1p(np.exp(-hi)), np.log1p(np.exp(lo)))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return custom_op("softplus", _softplus(x), (a,), lambda g: (g * _sigmoid(x),))


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch axes.

    ``a[..., m, k] @ b[k, n]`` shares ``b`` across the batch; ``a[..., m, k] @
    b[..., k, n]`` with identical leading axes is a batched product.
    """
    a = _operand(a)
    b = _operand(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return custom_op("matmul", ad @ bd, (a, b), backward)


# ---------------------------------------------------------------- normalizing


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine extents {gain.shape}/{bias.shape} do not match {d}")
    if eps < 0:
        raise ContractError("eps must be non-negative")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    out = xhat * gd + bd

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return custom_op("layer_norm", out, (x, gain, bias), backward)


def causal_depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution of ``x[B, S, C]`` with ``kernel[C, k]``.

    ``out[:, t, c] = bias[c] + sum_j kernel[c, j] * x[:, t - (k - 1) + j, c]``,
    reading zeros before the sequence start.
    """
    if x.ndim != 3:
        raise DimensionError(f"conv input must be [B, S, C], got {x.shape}")
    c = x.shape[2]
    if kernel.ndim != 2 or kernel.shape[0] != c or kernel.shape[1] < 1:
        raise DimensionError(f"conv kernel {kernel.shape} does not match {c} channels")
    if bias.shape != (c,):
        raise DimensionError(f"conv bias {bias.shape} does not match {c} channels")
    k = kernel.shape[1]
    s = x.shape[1]
    xd, kd = x.data, kernel.data
    xp = np.concatenate([np.zeros((x.shape[0], k - 1, c), dtype=xd.dtype), xd], axis=1)
    out = np.broadcast_to(bias.data, xd.shape).astype(np.result_type(xd, kd, bias.data), copy=True)
    for j in range(k):
        out += xp[:, j:j + s, :] * kd[:, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(k):
            gxp[:, j:j + s, :] += g * kd[:, j]
            gk[:, j] = (g * xp[:, j:j + s, :]).sum(axis=(0, 1))
        return gxp[:, k - 1:, :], gk, g.sum(axis=(0, 1))

    return custom_op("causal_conv1d", out, (x, kernel, bias), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", p, (x,), backward)


# ----------------------------------------------------------------- structural


def _axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(_axis(x.ndim, a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for {x.ndim}-d tensor")
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(str(err)) from None
    old = x.shape
    return custom_op("reshape", out, (x,), lambda g: (g.reshape(old),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _axis(x.ndim, axis)
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return custom_op("slice", x.data[idx].copy(), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise DimensionError("concat of nothing")
    axis = _axis(xs[0].ndim, axis)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as err:
        raise DimensionError(str(err)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return custom_op("concat", out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def reverse_axis(x: Tensor, axis: int) -> Tensor:
    axis = _axis(x.ndim, axis)
    return custom_op("reverse", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis).copy(),))


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return custom_op("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = _axis(x.ndim, axis)
    return custom_op(
        "sum", x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(x.ndim, axis)]
    if n == 0:
        raise DimensionError("mean over an empty extent")
    return mul(reduce_sum(x, axis), np.asarray(1.0 / n, dtype=x.dtype))


# -------------------------------------------------------------- verification


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` must rebuild the scalar loss from the current ``params`` each call.
    ``eps`` floors the denominator so entries whose true gradient is zero are
    compared in absolute terms against round-off in the differences.  With
    ``max_entries`` set, only a random subset of entries per parameter is probed.
    """
    for p in params:
        p.grad = None
    with GradientTape() as tape:
        loss = f()
    if loss._tape is tape:
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            an = float(ga.reshape(-1)[i])
            err = abs(an - num) / max(abs(an), abs(num), eps)
            worst = max(worst, err)
    return worst

"""Differentiable operations.

Every op computes its forward value with numpy and, when an active tape
exists and some input requires gradients, records a closure mapping the
output gradient to input gradients.

Operands must share one shape; the only broadcasting allowed is between a
tensor and a Python scalar (or a 0-d tensor).  Convolution-style ops accept
either an unbatched ``(C, H, W)`` tensor or a batched ``(N, C, H, W)`` one.
"""

from __future__ import annotations

from numbers import Real
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ContractError,
    DimensionError,
    DomainError,
    EmptyInputError,
    NonFiniteError,
    Tensor,
    current_tape,
)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (Real, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"expected Tensor or real scalar, got {type(x).__name__}")


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is supported)")


def _fold(g: np.ndarray, t: Tensor) -> np.ndarray:
    # Gradient of a scalar operand that was broadcast against a tensor.
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (_fold(g, a), _fold(g, b)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (_fold(g, a), _fold(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (_fold(g * bd, a), _fold(g * ad, b)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_pair("div", a, b)
    if np.any(b.data == 0):
        idx = np.flatnonzero(np.asarray(b.data).ravel() == 0)[0]
        raise DomainError(f"div: zero divisor at flat index {idx}")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result("div", out, (a, b), lambda g: (_fold(g / bd, a), _fold(-g * out / bd, b)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    with np.errstate(over="ignore"):  # overflow is reported by _result
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    bad = np.asarray(a.data).ravel() <= 0
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise DomainError(f"log: non-positive value {a.data.ravel()[idx]!r} at flat index {idx}")
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _result("softplus", out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def pow(a, exponent: float) -> Tensor:  # noqa: A001 - mirrors the math name
    """``a ** exponent`` for a scalar exponent; non-integer exponents need ``a > 0``."""
    a = _lift(a)
    x = a.data
    e = float(exponent)
    if not float(e).is_integer() and np.any(x <= 0):
        raise DomainError("pow: non-integer exponent of a non-positive value")
    out = np.power(x, e)
    if e == 0.0:
        return _result("pow", out, (a,), lambda g: (np.zeros_like(g),))
    return _result("pow", out, (a,), lambda g: (g * e * np.power(x, e - 1.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the value was inside."""
    a = _lift(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min of two same-shape tensors (or a tensor and a scalar); ties send gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _check_pair("minimum", a, b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _result("minimum", out, (a, b), lambda g: (_fold(g * take_a, a), _fold(g * ~take_a, b)))


def maximum(a, b) -> Tensor:
    """Elementwise max of two same-shape tensors (or a tensor and a scalar); ties send gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _check_pair("maximum", a, b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _result("maximum", out, (a, b), lambda g: (_fold(g * take_a, a), _fold(g * ~take_a, b)))


def detach(a) -> Tensor:
    """Copy of ``a`` that records no tape edge."""
    a = _lift(a)
    return Tensor._wrap(a.data)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "relu": relu,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; backward scatters into a zero array."""
    a = _lift(a)
    if isinstance(key, Tensor):
        raise TypeError("index with a Tensor is not supported; use a numpy array")
    out = np.array(a.data[key])
    shape, dtype = a.shape, a.data.dtype
    parts = key if isinstance(key, tuple) else (key,)
    # Integer-array keys may repeat positions and need an accumulating scatter.
    repeats = any(isinstance(p, (np.ndarray, list)) and np.asarray(p).dtype.kind in "iu" for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if repeats:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _result("index", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result("stack", out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", out, tensors, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    if a.size == 0:
        raise EmptyInputError("sum of an empty tensor")
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes)
    keep = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(np.reshape(g, keep), shape).copy(),)

    return _result("sum", out, (a,), backward)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    a = _lift(a)
    if a.size == 0:
        raise EmptyInputError("mean of an empty tensor")
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axes), 1.0 / count)


def max_with_argmax(a: Tensor):
    """Global maximum and its flat index; ties resolve to the lowest index."""
    a = _lift(a)
    if a.size == 0:
        raise EmptyInputError("max of an empty tensor")
    flat = a.data.ravel()
    k = int(np.argmax(flat))
    shape = a.shape

    def backward(g):
        full = np.zeros(a.size, dtype=a.data.dtype)
        full[k] = np.asarray(g).reshape(-1)[0]
        return (full.reshape(shape),)

    return _result("max", np.asarray(flat[k]), (a,), backward), k


def reduce(op: str, t: Tensor, axes=None):
    if op == "sum":
        return reduce_sum(t, axes)
    if op == "mean":
        return reduce_mean(t, axes)
    if op == "max_with_argmax":
        if axes is not None:
            raise ValueError("max_with_argmax reduces over all elements")
        return max_with_argmax(t)
    raise ValueError(f"unknown reduction {op!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _batched(x: np.ndarray, name: str):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding, optional per-channel bias."""
    xd, squeeze = _batched(x.data, "conv2d input")
    kd = kernel.data
    if kd.ndim != 4:
        raise DimensionError(f"conv2d kernel must be (C_out,C_in,k,k), got {kd.shape}")
    c_out, c_in, kh, kw = kd.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d kernel axes 2,3 must be equal and odd, got {kh}x{kw}")
    if xd.shape[1] != c_in:
        raise DimensionError(f"conv2d channel axis: input has {xd.shape[1]}, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    n, _, h, w = xd.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d spatial axes: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    k = kh
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are output pixels (N, Ho, Wo), columns are (C, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c_in * k * k)
    kflat = kd.reshape(c_out, c_in * k * k)
    out = (cols @ kflat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gb = g[None] if squeeze else g
        gflat = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        g_kernel = (gflat.T @ cols).reshape(kd.shape) if kernel.requires_grad else None
        g_x = None
        if x.requires_grad:
            # col2im in (N, H, W, k, k, C) layout so every add is channel-contiguous
            dcols = (gflat @ kflat).reshape(n, ho, wo, c_in, k * k)
            dcols = np.ascontiguousarray(dcols.transpose(0, 1, 2, 4, 3))
            gxp = np.zeros((n, hp, wp, c_in), dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i * k + j]
            gxp = gxp.transpose(0, 3, 1, 2)
            g_x = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp)
            if squeeze:
                g_x = g_x[0]
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _result("conv2d", out, inputs, backward)


def depthwise_xcorr(search: Tensor, template: Tensor) -> Tensor:
    """Per-channel sliding correlation of ``template`` over ``search`` (no flip).

    Batched inputs pair sample ``i`` of ``search`` with sample ``i`` of
    ``template``.
    """
    sd, s_sq = _batched(search.data, "depthwise_xcorr search")
    td, t_sq = _batched(template.data, "depthwise_xcorr template")
    if s_sq != t_sq:
        raise DimensionError("depthwise_xcorr: search and template must both be batched or both unbatched")
    if sd.shape[:2] != td.shape[:2]:
        raise DimensionError(
            f"depthwise_xcorr batch/channel axes differ: search {sd.shape[:2]} vs template {td.shape[:2]}"
        )
    n, c, hs, ws = sd.shape
    ht, wt = td.shape[2:]
    if ht > hs or wt > ws:
        raise DimensionError(f"depthwise_xcorr: template {ht}x{wt} larger than search {hs}x{ws}")
    ho, wo = hs - ht + 1, ws - wt + 1
    win = sliding_window_view(sd, (ht, wt), axis=(2, 3))  # (N, C, Ho, Wo, Ht, Wt)
    # Same window-row-times-kernel-column product as conv2d's im2col GEMM, so a
    # single channel reproduces conv2d bit for bit.
    cols = np.ascontiguousarray(win).reshape(n, c, ho * wo, ht * wt)
    out = (cols @ td.reshape(n, c, ht * wt, 1)).reshape(n, c, ho, wo)
    if s_sq:
        out = out[0]

    def backward(g):
        gb = g[None] if s_sq else g
        g_t = np.einsum("ncxy,ncxyij->ncij", gb, win) if template.requires_grad else None
        g_s = None
        if search.requires_grad:
            g_s = np.zeros_like(sd)
            for i in range(ht):
                for j in range(wt):
                    g_s[:, :, i : i + ho, j : j + wo] += gb * td[:, :, i, j][:, :, None, None]
        if s_sq:
            g_t = None if g_t is None else g_t[0]
            g_s = None if g_s is None else g_s[0]
        return (g_s, g_t)

    return _result("depthwise_xcorr", out, (search, template), backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize every channel map to zero mean and unit variance over its spatial axes.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)``; no learned scale or shift.
    """
    xd, sq = _batched(x.data, "instance_norm")
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    y = xc * inv
    out = y[0] if sq else y

    def backward(g):
        gb = g[None] if sq else g
        gx = inv * (gb - gb.mean(axis=(2, 3), keepdims=True) - y * (gb * y).mean(axis=(2, 3), keepdims=True))
        return (gx[0] if sq else gx,)

    return _result("instance_norm", out, (x,), backward)


__all__ = [
    "ContractError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "relu",
    "pow",
    "clip",
    "minimum",
    "maximum",
    "detach",
    "elementwise",
    "index",
    "reshape",
    "stack",
    "concat",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "max_with_argmax",
    "conv2d",
    "depthwise_xcorr",
    "instance_norm",
]

"""Differentiable numeric primitives.

All kernels are plain vectorised numpy, deterministic for a fixed input, and
keep the precision of their inputs (float32 for training, float64 for
gradient checks).
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from bussam.autodiff import Tensor, make_node
from bussam.errors import ConfigError, UsageError

_GELU_C = math.sqrt(2.0 / math.pi)
_routing: list[np.ndarray] | None = None


@contextlib.contextmanager
def record_routing() -> Iterator[list[np.ndarray]]:
    """Collect the argmax index arrays of every max-pool executed in the block.

    Two evaluations with equal routing lie on the same smooth piece of the
    network; finite differences are only meaningful across such pairs.
    """
    global _routing
    prev = _routing
    _routing = []
    try:
        yield _routing
    finally:
        _routing = prev


def _record(idx: np.ndarray) -> None:
    if _routing is not None:
        _routing.append(idx)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data
    return make_node(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return make_node(out, (a, b), back, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return make_node(
        out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),), "power"
    )


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with a pass-through gradient inside ``[lo, hi]``."""
    out = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_node(out, (x,), lambda g: (g * inside,), "clip")


# --------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_node(np.array(out), (x,), back, "getitem")


def split(x: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    n = x.shape[axis]
    if n % parts:
        raise ConfigError(f"cannot split axis of size {n} into {parts} equal parts")
    step = n // parts
    out = []
    for i in range(parts):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(x, tuple(idx)))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tuple(tensors), back, "concat")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return make_node(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    c_out, c_in = weight.shape
    if x.shape[-1] != c_in:
        raise ConfigError(f"linear expects last dim {c_in}, got input shape {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        g2 = g.reshape(-1, c_out)
        x2 = x.data.reshape(-1, c_in)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "linear")


# --------------------------------------------------------------------------
# convolution and pooling


def _col2im(gwin: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Scatter-add window gradients ``(N,C,Ho,Wo,kh,kw)`` back onto the input."""
    _, _, ho, wo, kh, kw = gwin.shape
    out = np.zeros(padded_shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gwin[..., i, j]
    return out


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation over an NCHW input with OIHW weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide in_channels={c} and out_channels={o}")
    if cg != c // groups:
        raise ConfigError(f"weight expects {cg} channels per group, input provides {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"bias shape {bias.shape} does not match out_channels={o}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    # accumulate in 64-bit so 32-bit outputs are correctly rounded sums
    acc = np.promote_types(x.dtype, np.float64)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = xp.astype(acc, copy=False)
    wdata = weight.data.astype(acc, copy=False)
    win = _windows(xp, kh, kw, stride, ho, wo)
    og = o // groups

    if groups == c and o == c:
        wk = wdata[:, 0]
        out = np.einsum("nchwij,cij->nchw", win, wk, optimize=True)

        def back_w(g):
            gw = np.einsum("nchwij,nchw->cij", win, g, optimize=True)[:, None]
            gwin = g[..., None, None] * wk[None, :, None, None]
            return gwin, gw
    else:
        k = cg * kh * kw
        cols = (
            win.reshape(n, groups, cg, ho, wo, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(groups, n * ho * wo, k)
        )
        wmat = wdata.reshape(groups, og, k).transpose(0, 2, 1)
        out = (cols @ wmat).reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)

        def back_w(g):
            gmat = g.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
            gw = (np.swapaxes(cols, 1, 2) @ gmat).transpose(0, 2, 1).reshape(o, cg, kh, kw)
            gwin = (
                (gmat @ np.swapaxes(wmat, 1, 2))
                .reshape(groups, n, ho, wo, cg, kh, kw)
                .transpose(1, 0, 4, 2, 3, 5, 6)
                .reshape(n, c, ho, wo, kh, kw)
            )
            return gwin, gw

    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = out.astype(x.dtype, copy=False)

    def back(g):
        gwin, gw = back_w(g.astype(acc, copy=False))
        gw = gw.astype(weight.dtype, copy=False)
        gx = None
        if x.requires_grad:
            gxp = _col2im(gwin, xp.shape, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = gx.astype(x.dtype, copy=False)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, back, "conv2d")


def pool(
    x: Tensor,
    axis_mode: str = "spatial",
    reduce: str = "max",
    kernel: int = 2,
    stride: int = 2,
) -> Tensor:
    """Max/mean pooling over spatial windows, or over the whole channel axis.

    In ``channel`` mode the result is ``N x 1 x H x W`` and ``kernel``/``stride``
    are ignored. Max ties go to the lowest flat index.
    """
    if reduce not in ("max", "mean"):
        raise ConfigError(f"unknown pooling reduction {reduce!r}")
    if x.ndim != 4:
        raise ConfigError(f"pool expects NCHW input, got shape {x.shape}")
    if axis_mode == "channel":
        if reduce == "max":
            idx = np.argmax(x.data, axis=1)[:, None]
            _record(idx)
            out = np.take_along_axis(x.data, idx, axis=1)

            def back(g):
                gx = np.zeros_like(x.data)
                np.put_along_axis(gx, idx, g, axis=1)
                return (gx,)
        else:
            c = x.shape[1]
            out = x.data.mean(axis=1, keepdims=True)

            def back(g):
                return (np.broadcast_to(g / c, x.shape).copy(),)

        return make_node(out, (x,), back, f"pool_channel_{reduce}")

    if axis_mode != "spatial":
        raise ConfigError(f"unknown pooling axis mode {axis_mode!r}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ConfigError(f"pool kernel {kernel} exceeds spatial extent {h}x{w}")
    if stride < 1:
        raise ConfigError("pool stride must be >= 1")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    flat = _windows(x.data, kernel, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    if reduce == "max":
        idx = np.argmax(flat, axis=-1)[..., None]
        _record(idx)
        out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

        def back(g):
            gflat = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
            np.put_along_axis(gflat, idx, g[..., None], axis=-1)
            return (_col2im(gflat.reshape(n, c, ho, wo, kernel, kernel), x.shape, stride),)
    else:
        out = flat.mean(axis=-1)

        def back(g):
            gwin = np.broadcast_to((g / (kernel * kernel))[..., None, None], (n, c, ho, wo, kernel, kernel))
            return (_col2im(gwin, x.shape, stride),)

    return make_node(out, (x,), back, f"pool_spatial_{reduce}")


# --------------------------------------------------------------------------
# resampling


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``(n_out, n_in)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    for i in range(n_out):
        num = i * (n_in - 1)
        lo = num // (n_out - 1)
        frac = (num - lo * (n_out - 1)) / (n_out - 1)
        m[i, lo] += 1.0 - frac
        if frac:
            m[i, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with corner-aligned bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ConfigError("bilinear_resize needs at least two axes")
    ry = interp_matrix(x.shape[-2], out_h, x.dtype)
    rx = interp_matrix(x.shape[-1], out_w, x.dtype)
    out = ry @ x.data @ rx.T
    return make_node(out, (x,), lambda g: (ry.T @ g @ rx,), "bilinear_resize")


# --------------------------------------------------------------------------
# normalisation


def normalize(
    x: Tensor,
    mode: str,
    scale: Tensor,
    shift: Tensor,
    num_groups: int = 1,
    eps: float = 1e-5,
) -> Tensor:
    """Layer or group normalisation followed by a per-channel affine.

    On NCHW input ``layer`` normalises each sample over (C, H, W), i.e. group
    normalisation with one group. On token input (rank 2 or 3) ``layer``
    normalises the last axis.
    """
    if mode not in ("layer", "group"):
        raise ConfigError(f"unknown normalisation mode {mode!r}")
    if x.ndim == 4:
        n, c = x.shape[:2]
        groups = 1 if mode == "layer" else num_groups
        if groups < 1 or c % groups:
            raise ConfigError(f"channels={c} not divisible by num_groups={groups}")
        xr = x.data.reshape(n, groups, -1)
        bshape = (1, c, 1, 1)
        sum_axes = (0, 2, 3)
    elif mode == "layer" and x.ndim in (2, 3):
        c = x.shape[-1]
        xr = x.data.reshape(-1, 1, c)
        bshape = (c,)
        sum_axes = tuple(range(x.ndim - 1))
    else:
        raise ConfigError(f"{mode} normalisation unsupported for shape {x.shape}")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigError(f"scale/shift must have shape ({c},), got {scale.shape}, {shift.shape}")

    mu = xr.mean(axis=-1, keepdims=True)
    centered = xr - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).reshape(x.shape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def back(g):
        gs = (g * xhat).sum(axis=sum_axes)
        gb = g.sum(axis=sum_axes)
        gxhat = (g * scale.data.reshape(bshape)).reshape(xr.shape)
        xh = xhat.reshape(xr.shape)
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xh * (gxhat * xh).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(x.shape), gs, gb

    return make_node(out, (x, scale, shift), back, f"normalize_{mode}")


# --------------------------------------------------------------------------
# activations


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    d = x.data
    t = np.tanh(_GELU_C * (d + 0.044715 * d ** 3))
    out = 0.5 * d * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * dt),)

    return make_node(out, (x,), back, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; outputs are kept strictly inside (0, 1)."""
    s = expit(x.data)
    lo = np.nextafter(x.dtype.type(0), x.dtype.type(1))
    hi = np.nextafter(x.dtype.type(1), x.dtype.type(0))
    s = np.clip(s, lo, hi)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_node(
        s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax"
    )

"""Differentiable primitives.

Each op computes its forward result with numpy and, when a tape is active and
an input requires grad, records a closure mapping the output gradient to one
gradient per input (``None`` for inputs that take no gradient).
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, active_tape, count_macs


def _make(data: np.ndarray, inputs: Sequence, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_check(a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    k = math.sqrt(2.0 / math.pi)
    inner = k * (xd + 0.044715 * xd ** 3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = k * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    ax = _norm_axes(axes, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=ax, keepdims=keepdims), (x,), backward)


def mean_over_axes(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(x.data.mean(axis=ax, keepdims=keepdims), (x,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose_axes(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise DimensionError(f"{axes} is not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    count_macs("matmul", out.size * ad.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map along the last axis; ``weight`` is [D_out, D_in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    count_macs("linear", out.size * wd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward)


# ---------------------------------------------------------------- convolution

def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ConfigError(f"expected 3 values, got {v}")
    return v


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 5 or len(w_shape) != 5:
        raise DimensionError(f"conv3d expects 5-d input and weight, got {x_shape}, {w_shape}")
    if groups < 1:
        raise ConfigError("groups must be >= 1")
    N, C, *dims = x_shape
    O, Cg, *k = w_shape
    if C % groups or O % groups:
        raise ConfigError(f"groups={groups} must divide C_in={C} and C_out={O}")
    if Cg != C // groups:
        raise DimensionError(f"weight expects {Cg} channels per group, input gives {C // groups}")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ConfigError("stride must be >= 1 and padding >= 0")
    out = []
    for d, kk, s, p in zip(dims, k, stride, padding):
        if d + 2 * p < kk:
            raise DimensionError(f"kernel {tuple(k)} does not fit padded input {x_shape}")
        out.append(conv_output_size(d, kk, s, p))
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0, groups: int = 1) -> Tensor:
    """3-D convolution (cross-correlation) with zero padding.

    ``x`` is [N, C_in, T, H, W]; ``weight`` is [C_out, C_in/groups, kT, kH, kW].
    The kernel is applied one offset at a time, so every offset costs a single
    strided slice and one contraction over channels.
    """
    stride, padding = _triple(stride), _triple(padding)
    out_dims = _conv_geometry(x.shape, weight.shape, stride, padding, groups)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv3d bias {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    N, C = xd.shape[:2]
    O, Cg, kt, kh, kw = wd.shape
    G, Og = groups, O // groups
    depthwise = Cg == 1 and Og == 1
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(xd, pads) if any(padding) else xd
    To, Ho, Wo = out_dims
    st, sh, sw = stride

    def window(a, b, c):
        return (slice(None), slice(None),
                slice(a, a + st * (To - 1) + 1, st),
                slice(b, b + sh * (Ho - 1) + 1, sh),
                slice(c, c + sw * (Wo - 1) + 1, sw))

    offsets = [(a, b, c) for a in range(kt) for b in range(kh) for c in range(kw)]
    dtype = np.result_type(xd, wd)
    if G == 1:
        out_cl = np.zeros((N, To, Ho, Wo, O), dtype=dtype)
        for a, b, c in offsets:
            xs = xp[window(a, b, c)]
            out_cl += np.tensordot(xs, wd[:, :, a, b, c], axes=([1], [1]))
        out = np.ascontiguousarray(np.moveaxis(out_cl, -1, 1))
    else:
        out = np.zeros((N, O) + out_dims, dtype=dtype)
        for a, b, c in offsets:
            xs = xp[window(a, b, c)]
            wk = wd[:, :, a, b, c]
            if depthwise:
                out += xs * wk[:, 0][None, :, None, None, None]
            else:
                xs_g = xs.reshape((N, G, Cg) + out_dims)
                out += np.einsum("ngcxyz,goc->ngoxyz", xs_g,
                                 wk.reshape(G, Og, Cg)).reshape(out.shape)
    if bias is not None:
        out += bias.data[None, :, None, None, None]
    count_macs("conv3d", out.size * Cg * kt * kh * kw)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        if G == 1:
            g_cl = np.ascontiguousarray(np.moveaxis(g, 1, -1))
        for a, b, c in offsets:
            win = window(a, b, c)
            xs = xp[win]
            wk = wd[:, :, a, b, c]
            if G == 1:
                gw[:, :, a, b, c] = np.tensordot(g, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gxp[win] += np.moveaxis(g_cl @ wk, -1, 1)
            elif depthwise:
                gw[:, 0, a, b, c] = (g * xs).sum(axis=(0, 2, 3, 4))
                gxp[win] += g * wk[:, 0][None, :, None, None, None]
            else:
                g_g = g.reshape((N, G, Og) + out_dims)
                xs_g = xs.reshape((N, G, Cg) + out_dims)
                gw[:, :, a, b, c] = np.einsum("ngoxyz,ngcxyz->goc", g_g, xs_g).reshape(O, Cg)
                gxp[win] += np.einsum("ngoxyz,goc->ngcxyz", g_g,
                                      wk.reshape(G, Og, Cg)).reshape(xs.shape)
        pt, ph, pw = padding
        T, H, W = xd.shape[2:]
        gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, backward)


def conv3d_reference(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride=1, padding=0, groups: int = 1) -> np.ndarray:
    """Direct nested-loop convolution. Slow; used to pin :func:`conv3d` in tests."""
    stride, padding = _triple(stride), _triple(padding)
    To, Ho, Wo = _conv_geometry(x.shape, weight.shape, stride, padding, groups)
    N, C, T, H, W = x.shape
    O, Cg, kt, kh, kw = weight.shape
    Og = O // groups
    out = np.zeros((N, O, To, Ho, Wo), dtype=np.result_type(x, weight))
    for n in range(N):
        for o in range(O):
            grp = o // Og
            for t in range(To):
                for h in range(Ho):
                    for w in range(Wo):
                        acc = 0.0 if bias is None else float(bias[o])
                        for c in range(Cg):
                            ci = grp * Cg + c
                            for a in range(kt):
                                ti = t * stride[0] + a - padding[0]
                                if not 0 <= ti < T:
                                    continue
                                for b in range(kh):
                                    hi = h * stride[1] + b - padding[1]
                                    if not 0 <= hi < H:
                                        continue
                                    for d in range(kw):
                                        wi = w * stride[2] + d - padding[2]
                                        if 0 <= wi < W:
                                            acc += x[n, ci, ti, hi, wi] * weight[o, c, a, b, d]
                        out[n, o, t, h, w] = acc
    return out


# ---------------------------------------------------------------- normalization

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: gamma/beta must be ({D},)")
    if eps <= 0:
        raise ConfigError("eps must be > 0")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


def batch_norm3d(x: Tensor, gamma: Tensor, beta: Tensor,
                 running_mean: Optional[np.ndarray], running_var: Optional[np.ndarray],
                 training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [N, C, T, H, W].

    Training mode uses biased batch statistics and updates the running buffers
    in place (unbiased variance, like the usual convention). Eval mode uses the
    running buffers.
    """
    if x.ndim != 5:
        raise DimensionError(f"batch_norm3d expects [N,C,T,H,W], got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm3d: gamma/beta must be ({C},)")
    axes = (0, 2, 3, 4)
    m = x.size // C
    bshape = (1, C, 1, 1, 1)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        if running_mean is not None and running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ConfigError("batch_norm3d in eval mode needs initialized running statistics")
        xc = xd - running_mean.astype(xd.dtype).reshape(bshape)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        gh = g * gd
        if training:
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gh * inv
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- attention helpers

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def drop_path(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Stochastic depth: zero whole samples (axis 0) of a residual branch.

    Survivors are scaled by 1/(1-rate) so the expectation is preserved.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop_path rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ConfigError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(mask_shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))

"""Differentiable operators for encoder-decoder segmentation networks.

Image tensors use N x C x H x W layout. Every forward op returns a
:class:`~vineseg.autograd.tensor.Tensor` whose backward closure maps the
upstream gradient to one gradient per input.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# elementwise algebra
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    return make_result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make_result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two identically shaped tensors (residual shortcut)."""
    if a.shape != b.shape:
        raise ValueError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _fill_columns(xp_n: np.ndarray, k: int, h: int, w: int, buf: np.ndarray) -> np.ndarray:
    # buf: (C, k, k, H, W); row-major (c, i, j) matches weight.reshape(F, C*k*k)
    for i in range(k):
        for j in range(k):
            buf[:, i, j] = xp_n[:, i : i + h, j : j + w]
    return buf.reshape(-1, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with "same" zero padding of (k-1)/2.

    ``weight`` is F x C x k x k with odd k; ``bias`` has length F.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    f, wc, k, k2 = weight.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},)")
    dtype = np.result_type(x.dtype, weight.dtype)
    wm = weight.data.reshape(f, c * k * k).astype(dtype, copy=False)
    out = np.empty((n, f, h, w), dtype=dtype)

    if k == 1:
        xs = x.data.reshape(n, c, h * w)
        for i in range(n):
            out[i] = (wm @ xs[i]).reshape(f, h, w)
        xp = None
    else:
        p = (k - 1) // 2
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))).astype(dtype, copy=False)
        buf = np.empty((c, k, k, h, w), dtype=dtype)
        for i in range(n):
            cols = _fill_columns(xp[i], k, h, w, buf)
            out[i] = (wm @ cols).reshape(f, h, w)
    if bias is not None:
        out += bias.data.astype(dtype, copy=False)[None, :, None, None]

    def backward(g):
        g = g.astype(dtype, copy=False)
        gw = np.zeros((f, c * k * k), dtype=dtype)
        gx = None
        need_x = x.requires_grad
        if k == 1:
            xs = x.data.reshape(n, c, h * w)
            if need_x:
                gx = np.empty((n, c, h * w), dtype=dtype)
            for i in range(n):
                gi = g[i].reshape(f, h * w)
                gw += gi @ xs[i].T
                if need_x:
                    gx[i] = wm.T @ gi
            if need_x:
                gx = gx.reshape(n, c, h, w)
        else:
            p = (k - 1) // 2
            buf = np.empty((c, k, k, h, w), dtype=dtype)
            if need_x:
                gxp = np.zeros_like(xp)
            for i in range(n):
                gi = g[i].reshape(f, h * w)
                cols = _fill_columns(xp[i], k, h, w, buf)
                gw += gi @ cols.T
                if need_x:
                    gcols = (wm.T @ gi).reshape(c, k, k, h, w)
                    for a in range(k):
                        for b in range(k):
                            gxp[i, :, a : a + h, b : b + w] += gcols[:, a, b]
            if need_x:
                gx = gxp[:, :, p : p + h, p : p + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw.reshape(weight.shape), gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv_transpose2x2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (learned 2x upsampling).

    ``weight`` is C_in x F x 2 x 2; output is N x F x 2H x 2W.
    """
    n, c, h, w = x.shape
    wc, f, kh, kw = weight.shape
    if wc != c or (kh, kw) != (2, 2):
        raise ValueError(f"conv_transpose2x2 weight {weight.shape} incompatible with input {x.shape}")
    dtype = np.result_type(x.dtype, weight.dtype)
    xt = x.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    wm = weight.data.reshape(c, f * 4)
    y = (xt @ wm).reshape(n, h, w, f, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, f, 2 * h, 2 * w)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def backward(g):
        gm = g.reshape(n, f, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * w, f * 4)
        gw = (xt.T @ gm).reshape(weight.shape)
        gx = (gm @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(y, dtype=dtype), parents, backward)


# ---------------------------------------------------------------------------
# pooling / resampling / joins
# ---------------------------------------------------------------------------


def maxpool2d_2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling, stride 2.

    Returns the pooled tensor and, per output cell, the flat index ``row * W + col``
    of the winning input cell within its (n, c) plane. Ties go to the smallest
    linear index.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d_2x2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = windows.argmax(axis=-1)
    pooled = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * 2 + arg // 2
    cols = np.arange(wo)[None, :] * 2 + arg % 2
    indices = rows * w + cols

    def backward(g):
        gx = np.zeros((n, c, h * w), dtype=g.dtype)
        np.put_along_axis(gx, indices.reshape(n, c, -1), g.reshape(n, c, -1), axis=2)
        return (gx.reshape(n, c, h, w),)

    return make_result(np.ascontiguousarray(pooled), (x,), backward), indices


def max_unpool2d(values: Tensor, indices: np.ndarray, out_hw: tuple[int, int]) -> Tensor:
    """Scatter pooled values back to their recorded argmax cells; zeros elsewhere."""
    n, c, h, w = values.shape
    if indices.shape != values.shape:
        raise ValueError(f"indices shape {indices.shape} does not match values {values.shape}")
    oh, ow = out_hw
    flat_idx = indices.reshape(n, c, -1)
    out = np.zeros((n, c, oh * ow), dtype=values.dtype)
    np.put_along_axis(out, flat_idx, values.data.reshape(n, c, -1), axis=2)

    def backward(g):
        return (np.take_along_axis(g.reshape(n, c, -1), flat_idx, axis=2).reshape(n, c, h, w),)

    return make_result(out.reshape(n, c, oh, ow), (values,), backward)


def upsample_nearest_2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis, in argument order."""
    if len(tensors) < 2:
        raise ValueError("concat_channels needs at least two tensors")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels shape mismatch: {tensors[0].shape} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return make_result(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    # keep outputs strictly inside (0, 1) where the float format would round to 0 or 1
    info = np.finfo(d.dtype)
    np.clip(s, info.tiny, 1.0 - info.epsneg, out=s)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 independently at every pixel."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), backward)


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "softmax_channels": softmax_channels}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# normalization / regularization
# ---------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, exponential
    moving average with ``momentum``). In eval mode the running statistics
    are used and nothing is mutated.
    """
    n, c, h, w = x.shape
    shape = (1, c, 1, 1)
    g_ = gamma.data.reshape(shape)
    b_ = beta.data.reshape(shape)
    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(shape)
    xhat = (x.data - mean.astype(x.dtype).reshape(shape)) * inv_std
    out = xhat * g_ + b_

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * g_
        if training:
            gx = inv_std / m * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | int | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def dice_loss(pred: Tensor, target, smooth: float = 1.0, per_channel: bool = False) -> Tensor:
    """Soft dice loss ``1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth)``.

    Sums run over every element of the batch. With ``per_channel=True`` the
    loss is computed separately for each channel (axis 1) and averaged, which
    is what the multi-class softmax head trains with.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ValueError(f"dice_loss target shape {t.shape} does not match prediction {pred.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("dice_loss targets must be 0 or 1")
    p = pred.data
    t = t.astype(p.dtype, copy=False)
    if per_channel:
        axes = tuple(i for i in range(p.ndim) if i != 1)
        inter = (p * t).sum(axis=axes)
        total = p.sum(axis=axes) + t.sum(axis=axes)
        k = p.shape[1]
        loss = 1.0 - ((2.0 * inter + smooth) / (total + smooth)).mean()
        bshape = (1, k) + (1,) * (p.ndim - 2)

        def backward(g):
            s = total + smooth
            d = -(2.0 * t * s.reshape(bshape) - (2.0 * inter + smooth).reshape(bshape)) / (s**2).reshape(bshape)
            return ((g / k) * d,)

    else:
        inter = (p * t).sum()
        total = p.sum() + t.sum()
        loss = 1.0 - (2.0 * inter + smooth) / (total + smooth)

        def backward(g):
            s = total + smooth
            return (g * -(2.0 * t * s - (2.0 * inter + smooth)) / s**2,)

    return make_result(np.asarray(loss, dtype=p.dtype), (pred,), backward)


__all__ = [
    "add",
    "neg",
    "mul",
    "sum_all",
    "mean_all",
    "residual_add",
    "conv2d",
    "conv_transpose2x2",
    "maxpool2d_2x2",
    "max_unpool2d",
    "upsample_nearest_2x",
    "concat_channels",
    "relu",
    "sigmoid",
    "softmax_channels",
    "activation",
    "batchnorm2d",
    "dropout",
    "dice_loss",
    "as_tensor",
]

"""Differentiable operations for the layer set used by the networks.

Every function takes and returns :class:`Tensor` objects.  Arrays are NCHW for
images and (N, K) for dense activations.  All reductions run in a fixed order
so that reruns are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor

PROB_CLIP = 1e-7


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        # whether a parent is a constant is fixed when the node is built, so
        # unfreezing a parameter later does not reopen old graphs
        out.parents = tuple(p if p.requires_grad else Tensor(p.data) for p in parents)
        out.backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
        return _make(
            np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),)
        )
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def backward_fn(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(out, (x,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        return [np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _make(out, tuple(tensors), backward_fn)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """``x[start:stop]`` along the batch axis."""
    out = x.data[start:stop].copy()

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _make(out, (x,), backward_fn)


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Return ``value`` in the forward pass and pass gradients to ``x`` unchanged."""
    value = np.asarray(value, dtype=np.float64)
    if value.shape != x.shape:
        raise ShapeError(f"straight-through value {value.shape} != input {x.shape}")
    return _make(value.copy(), (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# dense layers


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.shape} vs weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward_fn)


# ---------------------------------------------------------------------------
# convolutions


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> strided view (N, C, Ho, Wo, kh, kw)."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, full_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_correlate`: (N, F, Ho, Wo) -> (N, C, Hp, Wp)."""
    n, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N, C, kh, kw, Ho, Wo
    out = np.zeros((n, c) + tuple(full_hw))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def _kernel_grad(xp: np.ndarray, g: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = _windows(xp, kh, kw, stride)
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # F, C, kh, kw


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N, C, H, W) with ``kernel`` (F, C, kH, kW)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    out = _correlate(xp, kernel.data, stride)

    def backward_fn(g):
        dxp = _scatter(g, kernel.data, stride, xp.shape[2:])
        dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return np.ascontiguousarray(dx), _kernel_grad(xp, g, kh, kw, stride)

    return _make(out, (x, kernel), backward_fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Fractionally-strided convolution, the adjoint of :func:`conv2d`.

    ``kernel`` uses the conv2d layout (F, C, kH, kW): ``x`` carries F channels
    and the output carries C.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d tensors, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"conv_transpose2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv_transpose2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    kh, kw = kernel.shape[2:]
    h, w = x.shape[2:]
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (w - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {ho}x{wo}")
    full = _scatter(x.data, kernel.data, stride, ((h - 1) * stride + kh, (w - 1) * stride + kw))
    out = np.ascontiguousarray(full[:, :, pad : pad + ho, pad : pad + wo])

    def backward_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
        dx = _correlate(gp, kernel.data, stride)
        dk = _kernel_grad(gp, x.data, kh, kw, stride)
        return dx, dk

    return _make(out, (x, kernel), backward_fn)


def depthwise_highpass(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Apply a fixed zero-sum 2-D ``kernel`` to every channel of ``x`` (valid padding).

    Each window is centred on its middle pixel before weighting, so a
    constant input gives exactly zero.  The kernel is a constant, not a
    parameter: no gradient is produced for it.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    if x.data.ndim != 4 or kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"depthwise_highpass: bad input {x.shape} for {kh}x{kw} kernel")
    win = _windows(x.data, kh, kw, 1)
    centred = win - win[..., kh // 2, kw // 2][..., None, None]
    out = np.tensordot(centred, kernel, axes=([4, 5], [0, 1]))

    def backward_fn(g):
        n, c, ho, wo = g.shape
        eff = kernel.copy()
        eff[kh // 2, kw // 2] -= kernel.sum()
        dx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + ho, j : j + wo] += eff[i, j] * g
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), backward_fn)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"max_pool2d: window {window} exceeds spatial extent {x.shape[2:]}")
    win = _windows(x.data, window, window, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            hit = np.where(arg == idx, g, 0.0)
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += hit
        return (dx,)

    return _make(np.ascontiguousarray(out), (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel normalisation of (N, C) or (N, C, H, W) input.

    In training mode the batch statistics are used and, when ``update_stats``
    is set, folded into ``running_mean``/``running_var`` in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.data.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.data.ndim == 2:
        axes, bshape = (0,), (1, -1)
    else:
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm: scale/shift must have shape ({c},)")
    gamma = scale.data.reshape(bshape)
    beta = shift.data.reshape(bshape)

    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = gamma * xhat + beta

        def eval_backward(g):
            return (
                g * gamma * inv_std.reshape(bshape),
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return _make(out, (x, scale, shift), eval_backward)

    if x.shape[0] < 2:
        raise ValueError("batch_norm in training mode needs a batch of at least 2")
    m = x.data.size // c
    mu = x.data.mean(axis=axes)
    centered = x.data - mu.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bshape)
    out = gamma * xhat + beta
    if update_stats:
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var

    def backward_fn(g):
        dxhat = g * gamma
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, scale, shift), backward_fn)


# ---------------------------------------------------------------------------
# losses


def bce_loss(prediction: Tensor, target, clip: float = PROB_CLIP) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [clip, 1 - clip]."""
    t = np.broadcast_to(np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64),
                        prediction.shape)
    p_raw = prediction.data
    p = np.clip(p_raw, clip, 1.0 - clip)
    n = p.size
    per_item = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    out = np.asarray(per_item.sum() / n)
    inside = (p_raw > clip) & (p_raw < 1.0 - clip)

    def backward_fn(g):
        dp = (-(t / p) + (1.0 - t) / (1.0 - p)) / n
        return (np.where(inside, float(g) * dp, 0.0),)

    return _make(out, (prediction,), backward_fn)

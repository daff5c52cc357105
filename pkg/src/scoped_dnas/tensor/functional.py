"""Layer operations for the supernet: convolution, activations, batch norm,
pooling, the classifier head and the cross-entropy loss.

All tensors are NCHW. Every function returns a :class:`Tensor` that records
its backward closure when any input requires gradients.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, DegenerateVarianceError, ShapeError
from .tensor import Tensor

LEAKY_RELU_SLOPE = 0.01

ACTIVATIONS = ("relu", "leaky_relu", "mish")


def _out_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ConfigurationError(
            f"kernel {kernel} does not fit an input of extent {size} with padding {padding}"
        )
    return span // stride + 1


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (N, C, K, K, Ho, Wo) over a padded input."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


# convolution -----------------------------------------------------------------


def _conv_forward_im2col(x, w, stride, padding, ho, wo):
    o, c, k, _ = w.shape
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        n = x.shape[0]
        out = np.matmul(w.reshape(o, c), xs.reshape(n, c, ho * wo))
        return out.reshape(n, o, ho, wo)
    cols = _windows(_pad(x, padding), k, stride, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_forward_direct(x, w, stride, padding, ho, wo):
    n = x.shape[0]
    o, c, k, _ = w.shape
    xp = _pad(x, padding)
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j], optimize=False)
    return out


def _conv_backward(x, w, g, stride, padding, ho, wo, need_x, need_w, direct):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    gx = gw = None
    if k == 1 and padding == 0 and not direct:
        xs = x[:, :, ::stride, ::stride] if stride > 1 else x
        g2 = g.reshape(n, o, ho * wo)
        if need_w:
            gw = np.einsum("nop,ncp->oc", g2, xs.reshape(n, c, ho * wo)).reshape(o, c, 1, 1)
        if need_x:
            gxs = np.matmul(w.reshape(o, c).T, g2).reshape(n, c, ho, wo)
            if stride > 1:
                gx = np.zeros_like(x)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
        return gx, gw

    xp = _pad(x, padding)
    if need_w:
        if direct:
            gw = np.zeros_like(w)
            for i in range(k):
                for j in range(k):
                    patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch, optimize=False)
        else:
            cols = _windows(xp, k, stride, ho, wo)
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
    if need_x:
        gxp = np.zeros_like(xp)
        if direct:
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "nohw,oc->nchw", g, w[:, :, i, j], optimize=False
                    )
        else:
            dcols = np.tensordot(w, g, axes=([0], [1]))  # C, K, K, N, Ho, Wo
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
    return gx, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    method: str = "im2col",
) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIKK weight.

    ``method`` selects the im2col/GEMM path or the direct shift-and-accumulate
    loop; both produce the same values up to float rounding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w_in = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"input has {c} channels but weight expects {ci}")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} does not match {o} output channels")
    if method not in ("im2col", "direct"):
        raise ValueError(f"unknown convolution method {method!r}")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w_in, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ConfigurationError("convolution output extent is not positive")

    xd, wd = x.data, weight.data
    direct = method == "direct"
    forward = _conv_forward_direct if direct else _conv_forward_im2col
    out = forward(xd, wd, stride, padding, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gx, gw = _conv_backward(
            xd, wd, g, stride, padding, ho, wo, x.requires_grad, weight.requires_grad, direct
        )
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


# activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    a = x.data
    return Tensor._make(np.maximum(a, 0), (x,), lambda g: (g * (a > 0),))


def leaky_relu(x: Tensor, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    a = x.data
    scale = np.where(a > 0, 1.0, slope).astype(a.dtype)
    return Tensor._make(a * scale, (x,), lambda g: (g * scale,))


def mish(x: Tensor) -> Tensor:
    a = x.data
    sp = np.logaddexp(0, a)
    t = np.tanh(sp)
    out = a * t

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a))
        return (g * (t + a * (1.0 - t * t) * sig),)

    return Tensor._make(out, (x,), backward)


def zero_activation(x: Tensor) -> Tensor:
    """Outputs zeros everywhere; used to plant a provably useless candidate."""
    return Tensor._make(np.zeros_like(x.data), (x,), lambda g: (np.zeros_like(g),))


_ACTIVATION_FNS = {"relu": relu, "leaky_relu": leaky_relu, "mish": mish, "zero": zero_activation}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATION_FNS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}") from None
    return fn(x)


# batch normalization ---------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch mean/variance normalize the input and, when
    ``update_stats`` is set, the running buffers are updated in place with the
    unbiased variance.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine parameters must have shape ({c},), got {gamma.shape}/{beta.shape}")
    a = x.data
    shape = (1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise DegenerateVarianceError("training-mode batch_norm needs at least two values per channel")
        mean = a.mean(axis=(0, 2, 3))
        centered = a - mean.reshape(shape)
        var = (centered * centered).mean(axis=(0, 2, 3))
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean.astype(a.dtype), running_var.astype(a.dtype)
        centered = a - mean.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
    xhat = centered * inv_std.reshape(shape)
    gm, bt = gamma.data.reshape(shape), beta.data.reshape(shape)
    out = xhat * gm + bt

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gm
        if training:
            m = n * h * w
            gx = (inv_std.reshape(shape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


# pooling -----------------------------------------------------------------------


def _pool_extent(x: Tensor, window: int, stride: int, padding: int) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got shape {x.shape}")
    if window < 1 or stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid window={window} stride={stride} padding={padding}")
    if padding * 2 > window:
        raise ConfigurationError("padding must not exceed half the window")
    h, w = x.shape[2:]
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ConfigurationError(f"window {window} larger than padded input {h}x{w} (+{padding})")
    return _out_extent(h, window, stride, padding), _out_extent(w, window, stride, padding)


def max_pool2d(x: Tensor, window: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Max pooling; the backward pass routes each gradient to the first
    maximal element of its window in row-major order."""
    stride = stride or window
    ho, wo = _pool_extent(x, window, stride, padding)
    a = x.data
    xp = _pad(a, padding, value=-np.inf)
    n, c = a.shape[:2]
    cols = _windows(xp, window, stride, ho, wo)
    flat = cols.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * hit
        h, w = a.shape[2:]
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, window: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    stride = stride or window
    ho, wo = _pool_extent(x, window, stride, padding)
    a = x.data
    xp = _pad(a, padding)
    area = window * window
    out = _windows(xp, window, stride, ho, wo).sum(axis=(2, 3)) / area

    def backward(g):
        gxp = np.zeros_like(xp)
        share = g / area
        for i in range(window):
            for j in range(window):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
        h, w = a.shape[2:]
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._make(out.astype(a.dtype), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial extent."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    a = x.data
    return Tensor._make(
        a.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),),
    )


def pool(kind: str, x: Tensor, window: int = 2, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    if kind == "max":
        return max_pool2d(x, window, stride, padding)
    if kind == "avg":
        return avg_pool2d(x, window, stride, padding)
    if kind == "global-avg":
        return global_avg_pool(x)
    raise ValueError(f"unknown pooling kind {kind!r}")


# head and loss -----------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight laid out as (F, C)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} features but weight expects {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[1]} outputs")
        out = out + bias
    return out


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x C, got shape {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} outside [0, {c})")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)

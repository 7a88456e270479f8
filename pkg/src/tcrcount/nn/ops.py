"""Dense CNN kernels: forward passes with explicit, exact backward passes.

Every op works on plain numpy arrays shaped (N, C, H, W); single images are
passed as x[None]. The dtype follows the inputs: float32 is the production
mode, float64 is used by the gradient-check tests. Forward results are
deterministic for identical inputs.

Each forward returns (output, cache); the matching *_backward consumes the
cache and the upstream gradient and returns a LayerGrads. There is no
autodiff graph: the network composes these by hand.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class LayerGrads(NamedTuple):
    weight: Optional[np.ndarray]
    bias: Optional[np.ndarray]
    x: np.ndarray


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    """All k×k patches of x as a zero-copy strided view (N,C,H',W',k,k)."""
    n, c, h, w = x.shape
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, h - k + 1, w - k + 1, k, k),
        strides=(sn, sc, sh, sw, sh, sw),
        writeable=False,
    )


# ---------------------------------------------------------------- conv2d

def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-padded 2-D convolution (cross-correlation) with an odd kernel.

    weight: (out_ch, in_ch, k, k); bias: (out_ch,). Output spatial size
    equals input spatial size (zero padding of k//2 on each border).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    k = weight.shape[2]
    if weight.shape[2] != weight.shape[3] or k % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {weight.shape} expects {weight.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias {bias.shape} does not match out_ch {weight.shape[0]}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    y = np.einsum("nchwij,ocij->nohw", _windows(xp, k), weight, optimize=True)
    y += bias[None, :, None, None]
    return y, (xp, weight, x.shape)


def conv2d_backward(cache, dy: np.ndarray) -> LayerGrads:
    xp, weight, x_shape = cache
    k = weight.shape[2]
    p = k // 2
    db = dy.sum(axis=(0, 2, 3))
    dw = np.einsum("nchwij,nohw->ocij", _windows(xp, k), dy, optimize=True)
    # dx: full correlation of dy with the spatially flipped kernel, then the
    # padding border is cropped off.
    dyp = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    wf = weight[:, :, ::-1, ::-1]
    dxp = np.einsum("nohwij,ocij->nchw", _windows(dyp, k), wf, optimize=True)
    h, w = x_shape[2], x_shape[3]
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return LayerGrads(dw, db, np.ascontiguousarray(dx))


# ------------------------------------------------- transposed conv (2×2, stride 2)

def transposed_conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Stride-2 transposed convolution with a 2×2 kernel (the up-sampling block).

    weight: (in_ch, out_ch, 2, 2). Output is exactly 2× the input spatially;
    the op is the adjoint of a stride-2 2×2 convolution with the same kernel.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"transposed_conv2d expects (in,out,2,2) weight, got {weight.shape}")
    if weight.shape[0] != x.shape[1]:
        raise ShapeError(
            f"transposed_conv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    n, c, h, w = x.shape
    if h <= 0 or w <= 0:
        raise ShapeError(f"transposed_conv2d needs positive spatial dims, got {x.shape}")
    o = weight.shape[1]
    # stride == kernel: every input pixel scatters a disjoint 2×2 block.
    blocks = np.einsum("nchw,coab->nohwab", x, weight, optimize=True)
    y = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, o, 2 * h, 2 * w)
    y = y + bias[None, :, None, None]
    return y, (x, weight)


def transposed_conv2d_backward(cache, dy: np.ndarray) -> LayerGrads:
    x, weight = cache
    n, c, h, w = x.shape
    o = weight.shape[1]
    db = dy.sum(axis=(0, 2, 3))
    dblocks = dy.reshape(n, o, h, 2, w, 2).transpose(0, 1, 2, 4, 3, 5)
    dw = np.einsum("nchw,nohwab->coab", x, dblocks, optimize=True)
    dx = np.einsum("nohwab,coab->nchw", dblocks, weight, optimize=True)
    return LayerGrads(dw, db, dx)


# ---------------------------------------------------------------- max pool

def maxpool2x2(x: np.ndarray):
    """2×2/stride-2 max pooling. Odd trailing dims are replicate-padded.

    Ties inside a window resolve to the first element in row-major order,
    so the forward value and the backward routing are both deterministic.
    """
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x
    hh, ww = xp.shape[2] // 2, xp.shape[3] // 2
    win = xp.reshape(n, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh, ww, 4)
    arg = win.argmax(axis=-1)  # first max wins -> row-major tie rule
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return (y, arg), (arg, x.shape, xp.shape)


def maxpool2x2_backward(cache, dy: np.ndarray) -> LayerGrads:
    arg, x_shape, xp_shape = cache
    n, c, h, w = x_shape
    hh, ww = xp_shape[2] // 2, xp_shape[3] // 2
    dwin = np.zeros((n, c, hh, ww, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, arg[..., None], dy[..., None], axis=-1)
    dxp = dwin.reshape(n, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * ww)
    if xp_shape == x_shape:
        return LayerGrads(None, None, dxp)
    # fold replicate-padding gradient back onto the last real row/column
    dx = dxp[:, :, :h, :w].copy()
    if xp_shape[2] != h:
        dx[:, :, h - 1, :] += dxp[:, :, h, :w]
    if xp_shape[3] != w:
        dx[:, :, :, w - 1] += dxp[:, :, :h, w]
    if xp_shape[2] != h and xp_shape[3] != w:
        dx[:, :, h - 1, w - 1] += dxp[:, :, h, w]
    return LayerGrads(None, None, dx)


# ---------------------------------------------------------------- batch norm

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batch normalization.

    Train mode normalizes by the batch statistics over (N, H, W) and updates
    the running estimates in place with momentum 0.1; infer mode uses the
    running estimates. Population (biased) variance is used throughout.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"batchnorm2d got an empty channel: input {x.shape}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, train)


def batchnorm2d_backward(cache, dy: np.ndarray) -> LayerGrads:
    xhat, inv_std, gamma, train = cache
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        dx = dxhat * inv_std[None, :, None, None]
        return LayerGrads(dgamma, dbeta, dx)
    n, c, h, w = dy.shape
    m = n * h * w
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
    return LayerGrads(dgamma, dbeta, dx)


# ---------------------------------------------------------------- pointwise

def relu(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, (x > 0.0)


def relu_backward(cache, dy: np.ndarray) -> LayerGrads:
    return LayerGrads(None, None, dy * cache)


def sigmoid(x: np.ndarray):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(cache, dy: np.ndarray) -> LayerGrads:
    y = cache
    return LayerGrads(None, None, dy * y * (1.0 - y))


def concat_channels(a: np.ndarray, b: np.ndarray):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels spatial/batch mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(cache, dy: np.ndarray):
    """Returns (da, db), the gradients of the two concatenated inputs."""
    c1 = cache
    return dy[:, :c1], dy[:, c1:]


# ---------------------------------------------------------------- loss

def bce_with_sigmoid(logits: np.ndarray, targets: np.ndarray):
    """Mean binary cross-entropy fused with the sigmoid, numerically stable.

    loss = -(1/N) Σ [y·ln σ(x) + (1-y)·ln(1-σ(x))]; returns (loss, dloss/dx).
    Targets must lie in [0, 1].
    """
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_sigmoid shape mismatch: {logits.shape} vs {targets.shape}")
    if targets.size and (targets.min() < 0.0 or targets.max() > 1.0):
        raise ValueError("bce_with_sigmoid targets must lie in [0, 1]")
    x, y = logits, targets
    # max(x,0) - x*y + log(1+exp(-|x|)) never evaluates log of an underflowed sigmoid
    per_pixel = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    loss = float(per_pixel.sum() / n)
    sig, _ = sigmoid(x)
    grad = (sig - y) / n
    return loss, grad

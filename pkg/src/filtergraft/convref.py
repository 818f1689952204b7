"""Brute-force reference implementations of depthwise and pointwise convolution.

These are the oracles the test suite uses to validate the training backend.
Everything here is written with explicit Python loops on purpose: no fast
paths, no library convolution calls, so a backend bug cannot hide in shared
code. Keep inputs small.

Conventions: cross-correlation (no kernel flip), zero padding, dilation 1.
"""

import numpy as np
from scipy.special import erf

from .errors import ShapeMismatchError


def _check_4d(x, name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatchError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ShapeMismatchError(f"{name} has a non-positive dimension: {x.shape}")
    return x


def depthwise_conv_ref(x, kernels, stride=1, padding=0, bias=None):
    """Depthwise convolution: output channel c depends only on input channel c.

    x: (N, C, H, W) input.
    kernels: (C, kh, kw), one spatial kernel per channel.
    bias: optional (C,) per-channel bias.
    """
    x = _check_4d(x, "x")
    k = np.asarray(kernels, dtype=np.float64)
    if k.ndim != 3:
        raise ShapeMismatchError(f"kernels must be (C, kh, kw), got shape {k.shape}")
    n, c, h, w = x.shape
    kc, kh, kw = k.shape
    if kc != c:
        raise ShapeMismatchError(f"kernel channel count {kc} != input channel count {c}")
    if stride <= 0:
        raise ShapeMismatchError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeMismatchError(f"padding must be non-negative, got {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatchError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c,):
            raise ShapeMismatchError(f"bias must be ({c},), got {bias.shape}")

    xp = np.zeros((n, c, hp, wp), dtype=np.float64)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ni, ci, oi * stride + u, oj * stride + v] * k[ci, u, v]
                    if bias is not None:
                        acc += bias[ci]
                    out[ni, ci, oi, oj] = acc
    return out


def pointwise_conv_ref(y, weights, bias=None):
    """Pointwise (1x1) convolution: mixes channels at each spatial location.

    y: (N, C_in, H, W) input.
    weights: (C_out, C_in) channel-mixing matrix.
    bias: optional (C_out,).
    """
    y = _check_4d(y, "y")
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeMismatchError(f"weights must be (C_out, C_in), got shape {w.shape}")
    n, c_in, h, wdt = y.shape
    c_out, c_w = w.shape
    if c_w != c_in:
        raise ShapeMismatchError(f"weight C_in {c_w} != input channel count {c_in}")
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeMismatchError(f"bias must be ({c_out},), got {bias.shape}")

    out = np.zeros((n, c_out, h, wdt), dtype=np.float64)
    for ni in range(n):
        for oi in range(c_out):
            for hi in range(h):
                for wi in range(wdt):
                    acc = 0.0
                    for ci in range(c_in):
                        acc += w[oi, ci] * y[ni, ci, hi, wi]
                    if bias is not None:
                        acc += bias[oi]
                    out[ni, oi, hi, wi] = acc
    return out


def layernorm_ref(x, gamma, beta, eps=1e-6):
    """Layer normalization over the channel dimension of an (N, C, H, W) array.

    Matches normalizing the channel vector at each spatial position, which is
    what the mini block applies between the depthwise and pointwise stages.
    """
    x = _check_4d(x, "x")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xn = (x - mean) / np.sqrt(var + eps)
    return xn * gamma[None, :, None, None] + beta[None, :, None, None]


def gelu_ref(x):
    """Exact (erf-based) GELU, matching the backend's default."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def ds_block_ref(
    x,
    kernels,
    w1,
    w2,
    dw_bias=None,
    b1=None,
    b2=None,
    norm_gamma=None,
    norm_beta=None,
    eps=1e-6,
    residual=True,
):
    """One standard depthwise-separable block, composed from the reference ops.

    Pipeline: depthwise conv (stride 1, same padding) -> layer norm over
    channels -> pointwise expand w1 -> GELU -> pointwise project w2 ->
    optional residual. Padding is (k-1)//2 so spatial size is preserved;
    kernels must have odd size.
    """
    x = _check_4d(x, "x")
    k = np.asarray(kernels, dtype=np.float64)
    c = x.shape[1]
    kh = k.shape[1]
    if kh % 2 != 1 or k.shape[1] != k.shape[2]:
        raise ShapeMismatchError(f"block kernels must be square and odd, got {k.shape}")
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w1.shape[1] != c:
        raise ShapeMismatchError(f"w1 C_in {w1.shape[1]} != channel count {c}")
    if w2.shape != (c, w1.shape[0]):
        raise ShapeMismatchError(
            f"w2 must be ({c}, {w1.shape[0]}), got {w2.shape}"
        )
    if norm_gamma is None:
        norm_gamma = np.ones(c)
    if norm_beta is None:
        norm_beta = np.zeros(c)

    y = depthwise_conv_ref(x, k, stride=1, padding=(kh - 1) // 2, bias=dw_bias)
    y = layernorm_ref(y, norm_gamma, norm_beta, eps=eps)
    y = pointwise_conv_ref(y, w1, bias=b1)
    y = gelu_ref(y)
    y = pointwise_conv_ref(y, w2, bias=b2)
    return x + y if residual else y

"""Differentiable image-network ops on (N, C, H, W) or (C, H, W) tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from dunmri.tensor import Tensor, as_tensor, concat_channels, leaky_relu, make_op  # noqa: F401


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) -> (N*H*W, C*k*k) with zero 'same' padding."""
    n, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _correlate_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    out = _im2col(x, k) @ w.reshape(o, -1).T
    return out.reshape(n, h, wd, o).transpose(0, 3, 1, 2)


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 cross-correlation with zero padding (k-1)/2; weights (O, I, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    o, ci, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    xd, squeeze = _batched(x.data)
    if xd.shape[1] != ci:
        raise ValueError(f"conv2d: input has {xd.shape[1]} channels, weights expect {ci}")
    n, _, h, wd = xd.shape
    cols = _im2col(xd, k)
    out = (cols @ w.data.reshape(o, -1).T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gb = g[None] if squeeze else g
        gx = gw = gbias = None
        if needs[0]:
            w_adj = np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3)
            gx = _correlate_same(gb, w_adj)
            gx = gx[0] if squeeze else gx
        if needs[1]:
            g2 = gb.transpose(1, 0, 2, 3).reshape(o, -1)
            gw = (g2 @ cols).reshape(w.shape)
        if len(needs) > 2 and needs[2]:
            gbias = gb.sum(axis=(0, 2, 3))
        return (gx, gw, gbias)[:len(inputs)]

    return make_op("conv2d", out[0] if squeeze else out, inputs, vjp)


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) over its spatial dims, then affine."""
    if eps <= 0:
        raise ValueError(f"instance_norm: eps must be > 0, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, squeeze = _batched(x.data)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gm = gamma.data[None, :, None, None]
    out = gm * xhat + beta.data[None, :, None, None]

    def vjp(g, needs):
        gb = g[None] if squeeze else g
        gx = ggam = gbet = None
        if needs[0]:
            d = gb * gm
            gx = inv * (d - d.mean(axis=(2, 3), keepdims=True)
                        - xhat * (d * xhat).mean(axis=(2, 3), keepdims=True))
            gx = gx[0] if squeeze else gx
        if needs[1]:
            ggam = (gb * xhat).sum(axis=(0, 2, 3))
        if needs[2]:
            gbet = gb.sum(axis=(0, 2, 3))
        return gx, ggam, gbet

    return make_op("instance_norm", out[0] if squeeze else out, (x, gamma, beta), vjp)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling, stride 2."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def vjp(g, needs):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) / 4.0,)

    return make_op("avg_pool2", out, (x,), vjp)


def transpose_conv_up2(x, w, b=None) -> Tensor:
    """Kernel-2, stride-2 transposed convolution; weights (I, O, 2, 2)."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    xd, squeeze = _batched(x.data)
    ci, o = w.shape[:2]
    if w.shape[2:] != (2, 2):
        raise ValueError(f"transpose_conv_up2 needs (I,O,2,2) weights, got {w.shape}")
    if xd.shape[1] != ci:
        raise ValueError(f"transpose_conv_up2: input has {xd.shape[1]} channels, weights expect {ci}")
    n, _, h, wd = xd.shape
    # out[n, o, 2i+a, 2j+b] = sum_c x[n, c, i, j] w[c, o, a, b]
    prod = np.tensordot(xd, w.data, axes=([1], [0]))  # N,H,W,O,2,2
    out = prod.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g, needs):
        gb = g[None] if squeeze else g
        g6 = gb.reshape(n, o, h, 2, wd, 2)  # n,o,i,a,j,b
        gx = gw = gbias = None
        if needs[0]:
            gx = np.einsum("noiajb,coab->ncij", g6, w.data, optimize=True)
            gx = gx[0] if squeeze else gx
        if needs[1]:
            gw = np.einsum("ncij,noiajb->coab", xd, g6, optimize=True)
        if len(needs) > 2 and needs[2]:
            gbias = gb.sum(axis=(0, 2, 3))
        return (gx, gw, gbias)[:len(inputs)]

    return make_op("transpose_conv_up2", out[0] if squeeze else out, inputs, vjp)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _corr_valid(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    win = sliding_window_view(a, len(taps), axis=axis)
    return win @ taps


def _conv_full(a: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    k = len(taps)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (k - 1, k - 1)
    return _corr_valid(np.pad(a, pad), taps[::-1], axis)


def separable_filter_valid(x, taps: np.ndarray) -> Tensor:
    """Correlate the last two axes with ``outer(taps, taps)``, no padding."""
    x = as_tensor(x)
    k = len(taps)
    h, w = x.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} is smaller than the {k}x{k} window")
    out = _corr_valid(_corr_valid(x.data, taps, -1), taps, -2)

    def vjp(g, needs):
        return (_conv_full(_conv_full(g, taps, -2), taps, -1),)

    return make_op("filter_valid", out, (x,), vjp)

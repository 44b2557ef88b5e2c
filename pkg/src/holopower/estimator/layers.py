"""Layer primitives with explicit forward/backward passes.

Tensors are ``(N, C, H, W)``. Every ``*_forward`` returns ``(out, cache)`` and
the matching ``*_backward`` consumes the upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _check4(x, name="input"):
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a non-empty (N, C, H, W) tensor, got {x.shape}")


# -- convolution -------------------------------------------------------------

def conv2d_forward(x, w, b, padding=1):
    """Cross-correlation of ``x`` with ``w`` of shape ``(Cout, Cin, kh, kw)`` plus bias."""
    _check4(x)
    cout, cin, kh, kw = w.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    n, _, h, wd = x.shape
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    oh, ow = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(np.moveaxis(xp, 1, -1)).reshape(-1, cin)
    else:
        # (N, C, oh, ow, kh, kw) -> (N*oh*ow, C*kh*kw)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, -1)
    out = cols @ w.reshape(cout, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w, padding)


def conv2d_backward(dout, cache):
    cols, xshape, w, padding = cache
    cout, cin, kh, kw = w.shape
    n, _, h, wd = xshape
    oh, ow = dout.shape[2:]
    d2 = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, cout)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = d2 @ w.reshape(cout, -1)
    if kh == 1 and kw == 1:
        dxp = np.moveaxis(dcols.reshape(n, oh, ow, cin), -1, 1)
    else:
        # scatter-add the column gradients back, accumulating channels-last
        taps = np.ascontiguousarray(dcols.reshape(n, oh, ow, cin, kh * kw).transpose(4, 0, 1, 2, 3))
        acc = np.zeros((n, h + 2 * padding, wd + 2 * padding, cin), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                acc[:, i:i + oh, j:j + ow] += taps[i * kw + j]
        dxp = acc.transpose(0, 3, 1, 2)
    if padding:
        dx = dxp[:, :, padding:-padding, padding:-padding]
    else:
        dx = dxp
    return np.ascontiguousarray(dx), dw, db


def conv2d(x, w, b, padding=1):
    return conv2d_forward(x, w, b, padding)[0]


# -- batch normalization -----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train,
                      momentum=0.1, eps=1e-5):
    """Per-channel normalization.

    Train mode normalizes with the biased batch variance and returns updated
    running statistics (unbiased variance, exponential ``momentum``). Eval mode
    uses the running statistics and returns them unchanged.

    Returns ``(out, cache, (new_mean, new_var))``.
    """
    _check4(x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params expect {c} channels, got {gamma.shape}")
    shape = (1, c, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // c
        unbiased = var * m / max(m - 1, 1)
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, train), (new_mean, new_var)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    shape = (1, -1, 1, 1)
    dgamma = np.sum(dout * xhat, axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(shape)
    if train:
        m = dout.size // dout.shape[1]
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dxhat * inv_std.reshape(shape)
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def batchnorm(x, gamma, beta, running_mean, running_var, mode="train", momentum=0.1, eps=1e-5):
    """Convenience wrapper returning ``(out, (new_mean, new_var))``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, _, stats = batchnorm_forward(x, gamma, beta, running_mean, running_var,
                                      mode == "train", momentum, eps)
    return out, stats


# -- activation --------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# -- adaptive average pooling ------------------------------------------------

def pooling_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row ``i`` averages input cells ``floor(i n_in / n_out)`` to ``ceil((i + 1) n_in / n_out)``."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def downsample_forward(x, target_h, target_w):
    _check4(x)
    h, w = x.shape[2:]
    if not (1 <= target_h <= h and 1 <= target_w <= w):
        raise ShapeError(f"cannot pool {h}x{w} down to {target_h}x{target_w}")
    ph = pooling_matrix(h, target_h, x.dtype)
    pw = pooling_matrix(w, target_w, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ph, x, pw, optimize=True)
    return out, (ph, pw)


def downsample_backward(dout, cache):
    ph, pw = cache
    return np.einsum("ih,ncij,jw->nchw", ph, dout, pw, optimize=True)


def downsample_to(x, target_h, target_w):
    """Adaptive average pooling of ``x`` to ``target_h x target_w``."""
    return downsample_forward(x, target_h, target_w)[0]

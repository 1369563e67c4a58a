"""Forward/backward kernels for the formant network.

Every op returns ``(output, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache and returns gradients for the inputs and
parameters. Arrays are (batch, time, channels), float64.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

KERNEL = 3


class ShapeError(ValueError):
    pass


def _as2d(x):
    return x.reshape(-1, x.shape[-1])


# -- dilated convolution ------------------------------------------------------

def dilated_conv1d_same(x, W, b, d):
    """Non-causal k=3 convolution with taps at t-d, t, t+d and zero padding.

    The padded batch is flattened to rows so each tap is one GEMM over a
    shifted row window; rows that straddle two sequences are discarded.
    """
    B, T, C = x.shape
    c_out, c_in, k = W.shape
    if c_in != C or k != KERNEL or b.shape != (c_out,):
        raise ShapeError(f"conv weights {W.shape} do not fit input with {C} channels")
    if d < 1:
        raise ValueError("dilation must be >= 1")
    Tp = T + 2 * d
    xp = np.zeros((B * Tp, C), dtype=x.dtype)
    xp.reshape(B, Tp, C)[:, d:d + T] = x
    L = B * Tp - 2 * d
    taps = np.ascontiguousarray(W.transpose(2, 1, 0))
    yp = np.empty((B * Tp, c_out), dtype=x.dtype)
    yp[L:] = 0.0
    np.matmul(xp[:L], taps[0], out=yp[:L])
    for j in range(1, KERNEL):
        yp[:L] += xp[j * d:j * d + L] @ taps[j]
    y = yp.reshape(B, Tp, c_out)[:, :T] + b
    return y, (xp, taps, d, x.shape)


def dilated_conv1d_same_backward(dy, cache, skip_input_channels=0):
    """Gradients (dx, dW, db); dx is left at zero for the first
    ``skip_input_channels`` channels when the caller does not need them."""
    xp, taps, d, x_shape = cache
    B, T, C = x_shape
    c_out = taps.shape[2]
    Tp = T + 2 * d
    L = B * Tp - 2 * d
    dyp = np.zeros((B, Tp, c_out))
    dyp[:, :T] = dy
    dyp = dyp.reshape(B * Tp, c_out)[:L]
    dW = np.empty((c_out, C, KERNEL))
    dxp = np.zeros((B * Tp, C))
    s = skip_input_channels
    for j in range(KERNEL):
        dW[:, :, j] = dyp.T @ xp[j * d:j * d + L]
        dxp[j * d:j * d + L, s:] += dyp @ taps[j][s:].T
    db = dy.sum(axis=(0, 1))
    return dxp.reshape(B, Tp, C)[:, d:d + T], dW, db


# -- batch normalization over valid frames -------------------------------------

def batch_norm_masked(x, mask, gamma, beta, running_mean, running_var,
                      train=True, eps=1e-5):
    """Per-channel normalization; statistics come from valid frames only.

    Returns (y, cache, batch_stats); batch_stats is (mean, var) in train
    mode and None otherwise. Running statistics are not modified here.
    """
    m = np.asarray(mask, dtype=x.dtype)[..., None]
    if train:
        n = m.sum()
        if n < 2:
            raise ValueError("batch norm needs at least 2 valid frames in train mode")
        mu = (x * m).sum(axis=(0, 1)) / n
        xc = x - mu
        var = (xc * xc * m).sum(axis=(0, 1)) / n
    else:
        mu, var = running_mean, running_var
        xc = x - mu
        n = None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma * xhat + beta
    stats = (mu, var) if train else None
    return y, (xc, xhat, inv, m, n, gamma, train), stats


def batch_norm_masked_backward(dy, cache):
    xc, xhat, inv, m, n, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    dvar = -0.5 * inv ** 3 * (dxhat * xc).sum(axis=(0, 1))
    dmu = -inv * dxhat.sum(axis=(0, 1)) - 2.0 * dvar * (xc * m).sum(axis=(0, 1)) / n
    dx = dxhat * inv + m * (2.0 * dvar * xc + dmu) / n
    return dx, dgamma, dbeta


# -- gated linear unit ----------------------------------------------------------

def glu(x, W, b, V, c):
    """(x W + b) * sigmoid(x V + c), applied per frame."""
    if W.shape[0] != x.shape[-1] or V.shape != W.shape:
        raise ShapeError("GLU weights do not match the input channels")
    x2 = _as2d(x)
    lin = x2 @ W + b
    gate = expit(x2 @ V + c)
    y = (lin * gate).reshape(x.shape[:-1] + (W.shape[1],))
    return y, (x2, lin, gate, W, V, x.shape)


def glu_backward(dy, cache):
    x2, lin, gate, W, V, x_shape = cache
    dy2 = _as2d(dy)
    dlin = dy2 * gate
    dpre = dy2 * lin * gate * (1.0 - gate)
    dx = (dlin @ W.T + dpre @ V.T).reshape(x_shape)
    return dx, x2.T @ dlin, dlin.sum(axis=0), x2.T @ dpre, dpre.sum(axis=0)


# -- channel (spatial) dropout -------------------------------------------------

def channel_dropout(x, p, train, rng=None):
    """Zero whole (batch, channel) rows across time with probability p."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or p == 0.0:
        return x, None
    keep = rng.random((x.shape[0], 1, x.shape[2])) >= p
    scale = keep / (1.0 - p)
    return x * scale, scale


def channel_dropout_backward(dy, cache):
    return dy if cache is None else dy * cache


# -- concatenation and per-frame dense layers ----------------------------------

def concat_channels(xs):
    if not xs:
        raise ShapeError("nothing to concatenate")
    lead = xs[0].shape[:2]
    if any(x.shape[:2] != lead for x in xs):
        raise ShapeError("concat inputs differ in batch or time size")
    return np.concatenate(xs, axis=2), [x.shape[2] for x in xs]


def concat_channels_backward(dy, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=2)


def dense_td(x, W, b, activation="linear"):
    if W.shape[0] != x.shape[-1] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense weights {W.shape} do not fit input with {x.shape[-1]} channels")
    x2 = _as2d(x)
    pre = x2 @ W + b
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "linear":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return out.reshape(x.shape[:-1] + (W.shape[1],)), (x2, pre, W, activation, x.shape)


def dense_td_backward(dy, cache):
    x2, pre, W, activation, x_shape = cache
    dpre = _as2d(dy)
    if activation == "relu":
        dpre = dpre * (pre > 0)
    return (dpre @ W.T).reshape(x_shape), x2.T @ dpre, dpre.sum(axis=0)


# -- losses ------------------------------------------------------------------------

def masked_mae(pred, target, mask):
    """Mean |pred - target| over valid frames; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape != np.shape(mask):
        raise ShapeError("pred, target and mask shapes differ")
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no valid frames")
    diff = np.where(m, pred - target, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def combined_loss(preds, targets, mask, weights=(1 / 3, 1 / 3, 1 / 3)):
    """Weighted sum of the per-formant masked MAEs.

    Returns (total, dtotal/dpreds, per_formant_losses).
    """
    if len(preds) != len(weights) or len(targets) != len(weights):
        raise ShapeError("need one prediction and target per loss weight")
    if min(weights) < 0:
        raise ValueError("loss weights must be non-negative")
    total = 0.0
    parts, grads = [], []
    for p, t, w in zip(preds, targets, weights):
        loss, g = masked_mae(p, t, mask)
        total += w * loss
        parts.append(loss)
        grads.append(w * g)
    return total, np.stack(grads), parts


# -- finite-difference verification ------------------------------------------------

def relative_error(analytic, numeric, floor=1e-8):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(loss_and_grads, arrays, h=1e-5):
    """Compare analytic gradients with central differences on every coordinate.

    ``loss_and_grads(arrays)`` must return (scalar, {name: gradient}). The
    arrays are perturbed in place and restored. Returns (max error,
    {name: max error}).
    """
    _, analytic = loss_and_grads(arrays)
    per_name = {}
    for name, arr in arrays.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grads(arrays)
            flat[i] = orig - h
            down, _ = loss_and_grads(arrays)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        per_name[name] = float(relative_error(analytic[name], numeric).max()) if arr.size else 0.0
    return max(per_name.values()), per_name

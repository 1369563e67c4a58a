"""Finite-difference verification of every backward pass, layer by layer and end to end."""
from __future__ import annotations

import numpy as np

from . import model as M
from . import nn
from .rng import derive_rng

TINY_CONFIG = M.ModelConfig(channels=4, input_dim=6, head_width=8)
LINEAR_LAYERS = ("conv", "dense_linear", "concat")
LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4

# Projection losses are kept small in magnitude: parameters whose true
# gradient is zero (conv bias under batch norm) would otherwise show
# roundoff noise of order eps * |loss| / h in the numeric estimate.
LOSS_SCALE = 1e-3


def _projection(shape, rng):
    return rng.standard_normal(shape) * LOSS_SCALE / np.prod(shape)


def _suffix_mask(B, T):
    mask = np.ones((B, T), dtype=bool)
    mask[-1, T - T // 4:] = False
    return mask


def check_conv(rng, B=2, T=12, C_in=3, C_out=4, d=2, h=1e-5):
    arrays = {"x": rng.standard_normal((B, T, C_in)), "W": rng.standard_normal((C_out, C_in, 3)),
              "b": rng.standard_normal(C_out)}
    r = _projection((B, T, C_out), rng)

    def f(a):
        y, cache = nn.dilated_conv1d_same(a["x"], a["W"], a["b"], d)
        dx, dW, db = nn.dilated_conv1d_same_backward(r, cache)
        return float((y * r).sum()), {"x": dx, "W": dW, "b": db}
    return nn.grad_check(f, arrays, h)[0]


def check_batch_norm(rng, B=2, T=10, C=3, h=1e-5):
    mask = _suffix_mask(B, T)
    arrays = {"x": rng.standard_normal((B, T, C)) * 2 + 1, "gamma": rng.standard_normal(C),
              "beta": rng.standard_normal(C)}
    r = _projection((B, T, C), rng)

    def f(a):
        y, cache, _ = nn.batch_norm_masked(a["x"], mask, a["gamma"], a["beta"], np.zeros(C),
                                           np.ones(C), train=True)
        dx, dg, db = nn.batch_norm_masked_backward(r, cache)
        return float((y * r).sum()), {"x": dx, "gamma": dg, "beta": db}
    return nn.grad_check(f, arrays, h)[0]


def check_glu(rng, B=2, T=6, C=4, h=1e-5):
    arrays = {"x": rng.standard_normal((B, T, C)), "W": rng.standard_normal((C, C)),
              "b": rng.standard_normal(C), "V": rng.standard_normal((C, C)), "c": rng.standard_normal(C)}
    r = _projection((B, T, C), rng)

    def f(a):
        y, cache = nn.glu(a["x"], a["W"], a["b"], a["V"], a["c"])
        dx, dW, db, dV, dc = nn.glu_backward(r, cache)
        return float((y * r).sum()), {"x": dx, "W": dW, "b": db, "V": dV, "c": dc}
    return nn.grad_check(f, arrays, h)[0]


def check_dense(rng, activation, B=2, T=6, C_in=5, C_out=4, h=1e-5):
    arrays = {"x": rng.standard_normal((B, T, C_in)), "W": rng.standard_normal((C_in, C_out)),
              "b": rng.standard_normal(C_out)}
    r = _projection((B, T, C_out), rng)

    def f(a):
        y, cache = nn.dense_td(a["x"], a["W"], a["b"], activation)
        dx, dW, db = nn.dense_td_backward(r, cache)
        return float((y * r).sum()), {"x": dx, "W": dW, "b": db}
    return nn.grad_check(f, arrays, h)[0]


def check_concat(rng, B=2, T=5, h=1e-5):
    arrays = {"a": rng.standard_normal((B, T, 3)), "b": rng.standard_normal((B, T, 2))}
    r = _projection((B, T, 5), rng)

    def f(a):
        y, sizes = nn.concat_channels([a["a"], a["b"]])
        da, db = nn.concat_channels_backward(r, sizes)
        return float((y * r).sum()), {"a": da, "b": db}
    return nn.grad_check(f, arrays, h)[0]


def check_dropout(rng, B=2, T=5, C=6, p=0.3, h=1e-5):
    arrays = {"x": rng.standard_normal((B, T, C))}
    r = _projection((B, T, C), rng)
    seed = int(rng.integers(2**31))

    def f(a):
        y, cache = nn.channel_dropout(a["x"], p, True, np.random.default_rng(seed))
        return float((y * r).sum()), {"x": nn.channel_dropout_backward(r, cache)}
    return nn.grad_check(f, arrays, h)[0]


def check_loss(rng, B=2, T=8, h=1e-5):
    mask = _suffix_mask(B, T)
    targets = rng.standard_normal((3, B, T))
    # keep every |pred - target| well away from the kink at 0
    offset = rng.choice([-1.0, 1.0], size=(3, B, T)) * rng.uniform(0.5, 1.0, size=(3, B, T))
    arrays = {"preds": targets + offset}
    weights = (0.2, 0.3, 0.5)

    def f(a):
        loss, grads, _ = nn.combined_loss(a["preds"], targets, mask, weights)
        return loss * LOSS_SCALE, {"preds": grads * LOSS_SCALE}
    return nn.grad_check(f, arrays, h)[0]


def check_network(config: M.ModelConfig = TINY_CONFIG, B=2, T=16, seed=0, h=1e-5):
    """Full network in train mode (batch statistics, fixed dropout pattern).

    Covers every trainable tensor and the input features.
    """
    rng = derive_rng(seed, "check")
    w = M.build(config, seed)
    for name, v in w.params.items():
        if not M.is_running_stat(name) and not name.endswith(".W") and not name.endswith(".V"):
            v += 0.1 * rng.standard_normal(v.shape)
    x = rng.standard_normal((B, T, config.input_dim))
    mask = _suffix_mask(B, T)
    r = _projection((3, B, T), rng) * mask
    drop_seed = int(rng.integers(2**31))
    arrays = dict(w.trainable())
    arrays["input"] = x

    def f(a):
        preds, cache = M.forward(w, a["input"], mask, train=True,
                                 rng=np.random.default_rng(drop_seed))
        grads, dx = M.backward(w, cache, r)
        grads["input"] = dx
        return float((preds * r).sum()), grads
    _, per_name = nn.grad_check(f, arrays, h)
    return per_name


def run_all(config: M.ModelConfig = TINY_CONFIG, seed=0):
    """{layer: max relative error}, with the full network under "network"."""
    rng = derive_rng(seed, "check")
    out = {
        "conv": check_conv(rng),
        "dense_linear": check_dense(rng, "linear"),
        "concat": check_concat(rng),
        "dense_relu": check_dense(rng, "relu"),
        "glu": check_glu(rng),
        "batch_norm": check_batch_norm(rng),
        "dropout": check_dropout(rng),
        "loss": check_loss(rng),
    }
    out["network"] = max(check_network(config, seed=seed).values())
    return out


def tolerance(layer):
    return LINEAR_TOL if layer in LINEAR_LAYERS else NONLINEAR_TOL

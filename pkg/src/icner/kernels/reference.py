"""Plain numpy implementations of the training hot-path kernels.

This backend is the semantic reference: the compiled backend must agree with
it to float tolerance, and tests (including finite-difference checks) run
against whichever backend is active. All functions are pure except
adamw_step, which updates its arrays in place.

Shapes: row-major 2D arrays, rows = sequence positions.
"""

from __future__ import annotations

import numpy as np

NAME = "reference"

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def ln_fwd(x, gamma, beta, eps=1e-5):
    """Row-wise layer norm. Returns (y, mean, rstd) with the latter two kept
    for the backward pass."""
    mean = x.mean(axis=-1)
    var = x.var(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[..., None]) * rstd[..., None]
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), mean, rstd


def ln_bwd(dy, x, gamma, mean, rstd):
    xhat = (x - mean[..., None]) * rstd[..., None]
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    d = x.shape[-1]
    dx = rstd[..., None] * (
        dxhat
        - dxhat.mean(axis=-1)[..., None]
        - xhat * (dxhat * xhat).sum(axis=-1)[..., None] / d
    )
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def softmax_fwd(scores):
    """Row softmax with max subtraction; rows that are entirely -inf come out
    as all zeros instead of NaN."""
    m = scores.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(scores - m)
    z = e.sum(axis=-1, keepdims=True)
    z = np.where(z == 0.0, 1.0, z)
    return (e / z).astype(scores.dtype, copy=False)


def softmax_bwd(dprobs, probs):
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return (probs * (dprobs - inner)).astype(probs.dtype, copy=False)


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(u))).astype(x.dtype, copy=False)


def gelu_bwd(dy, x):
    x2 = x * x
    u = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    dx = dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
    return dx.astype(x.dtype, copy=False)


def xent_fwd_bwd(logits, targets):
    """Fused token cross-entropy.

    Returns (losses, dlogits): per-row negative log-likelihood of the target
    id and the gradient of the summed loss, i.e. softmax(logits) - onehot.
    """
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    logz = np.log(z)
    rows = np.arange(logits.shape[0])
    losses = (logz[:, 0] - shifted[rows, targets]).astype(logits.dtype, copy=False)
    dlogits = (e / z).astype(logits.dtype, copy=False)
    dlogits[rows, targets] -= 1.0
    return losses, dlogits


def adamw_step(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """Decoupled-weight-decay Adam update, in place on param/m/v (1D views).

    t is the step count after incrementing (>= 1); bias correction uses it.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    if weight_decay:
        param -= lr * weight_decay * param
    param -= step.astype(param.dtype, copy=False)

"""Forward/backward pairs for the handful of layers the models use.

Every ``*_backward`` takes the cache returned by its forward and an upstream
gradient, and returns the gradient with respect to the layer input plus any
parameter gradients. Arrays may carry arbitrary leading batch axes.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    return np.logaddexp(0.0, x)


def linear_backward(x, w, dy):
    """Gradients of ``y = x @ w + b``; leading axes of x/dy are summed out."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


LN_EPS = 1e-5


def layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layernorm_backward(cache, gain, dy):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    flat = dy.reshape(-1, dy.shape[-1])
    return dx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)


def rope_tables(max_len: int, head_dim: int, base: float = 10000.0):
    """cos/sin tables of shape (max_len, head_dim) for the half-split layout."""
    half = head_dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = np.arange(max_len)[:, None] * freqs[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(y):
    h = y.shape[-1] // 2
    return np.concatenate([y[..., h:], -y[..., :h]], axis=-1)


def rope(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def rope_backward(dy, cos, sin):
    return dy * cos + _rotate_half_t(dy * sin)


def causal_attention(q, k, v):
    """Scaled dot-product attention with a strict causal mask.

    q, k, v have shape (..., T, dh). Masked scores are set to -inf before the
    row max, so later positions contribute exact zeros.
    """
    T, dh = q.shape[-2], q.shape[-1]
    scale = 1.0 / np.sqrt(dh)
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(mask, -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    return a @ v, a


def causal_attention_backward(q, k, v, a, dout):
    scale = 1.0 / np.sqrt(q.shape[-1])
    da = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(a, -1, -2) @ dout
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv

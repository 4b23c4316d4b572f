"""Forward/backward pairs for the handful of layers the classifier uses.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Arrays are float64; leading axes are batch-like.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-vector normalization over the last axis (population variance)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    return gamma * (xc * inv) + beta


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dout.ndim - 1))
    dgamma = np.sum(dout * xhat, axis=lead)
    dbeta = np.sum(dout, axis=lead)
    g = dout * gamma
    dx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * np.mean(g * xhat, axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dout, x, w):
    d_in, d_out = w.shape
    x2, g2 = x.reshape(-1, d_in), dout.reshape(-1, d_out)
    return dout @ w.T, x2.T @ g2, g2.sum(axis=0)


def gelu_forward(x):
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_backward(dout, cache):
    x, x2, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def batch_norm_forward(x, gamma, beta, mean, var, eps):
    """Channel-wise normalization with the given statistics (channels on the last axis)."""
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def batch_norm_backward(dout, cache, batch_stats):
    """Backward through BN; with ``batch_stats`` the statistics depend on ``x``."""
    xhat, inv, gamma = cache
    c = dout.shape[-1]
    g2 = dout.reshape(-1, c)
    xh2 = xhat.reshape(-1, c)
    dgamma = np.sum(g2 * xh2, axis=0)
    dbeta = g2.sum(axis=0)
    gg = g2 * gamma
    if batch_stats:
        dx = inv * (gg - gg.mean(axis=0) - xh2 * np.mean(gg * xh2, axis=0))
    else:
        dx = gg * inv
    return dx.reshape(dout.shape), dgamma, dbeta


def max_pool_forward(x, axis):
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    return np.squeeze(out, axis=axis), (idx, x.shape, axis)


def max_pool_backward(dout, cache):
    idx, shape, axis = cache
    dx = np.zeros(shape)
    np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(dout, axis), axis=axis)
    return dx


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(h, w_q, w_k, w_v, w_o, b_o, n_heads):
    """Multi-head self-attention on already-normalized tokens ``h`` (B, T, d).

    Returns ``(out, attn, cache)`` where ``attn`` is (B, n_heads, T, T) and every
    row sums to one.
    """
    b, t, d = h.shape
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(m):
        return m.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(h @ w_q), split(h @ w_k), split(h @ w_v)
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = ctx @ w_o + b_o
    return out, attn, (h, q, k, v, attn, ctx, scale, n_heads)


def attention_backward(dout, cache, w_q, w_k, w_v, w_o):
    h, q, k, v, attn, ctx, scale, n_heads = cache
    b, t, d = h.shape
    dh = d // n_heads

    def split(m):
        return m.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(m):
        return m.transpose(0, 2, 1, 3).reshape(b, t, d)

    g2 = dout.reshape(-1, d)
    dw_o = ctx.reshape(-1, d).T @ g2
    db_o = g2.sum(axis=0)
    dctx = split(dout @ w_o.T)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    ds = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    h2 = h.reshape(-1, d)
    dw_q = h2.T @ dq.reshape(-1, d)
    dw_k = h2.T @ dk.reshape(-1, d)
    dw_v = h2.T @ dv.reshape(-1, d)
    dh_in = dq @ w_q.T + dk @ w_k.T + dv @ w_v.T
    return dh_in, dw_q, dw_k, dw_v, dw_o, db_o

"""Numpy building blocks with hand-written backward passes.

Every forward returns ``(output, cache)`` and every backward takes the
upstream gradient plus that cache and returns input and parameter
gradients. All arrays are float64.
"""

import numpy as np

LN_EPS = 1e-5


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(dy, x, W):
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


def gated_cell_step(x_proj, h_prev, U, b):
    """One step of the minimal gated cell.

    ``a = x_proj + h_prev U + b`` is split into a forget/update gate ``f``
    and a candidate ``c``; the new state is ``(1 - f) h_prev + f c``.
    """
    H = h_prev.shape[-1]
    a = x_proj + h_prev @ U + b
    f = sigmoid(a[..., :H])
    c = np.tanh(a[..., H:])
    return (1.0 - f) * h_prev + f * c, (f, c)


def gated_cell_forward(x, W, U, b, h0=None):
    """Run the cell over time. ``x`` is ``T x I``; returns ``T x H``."""
    T = x.shape[0]
    H = U.shape[0]
    xp = x @ W
    hs = np.zeros((T, H))
    fs = np.zeros((T, H))
    cs = np.zeros((T, H))
    h = np.zeros(H) if h0 is None else h0
    for t in range(T):
        h, (f, c) = gated_cell_step(xp[t], h, U, b)
        hs[t], fs[t], cs[t] = h, f, c
    h_init = np.zeros(H) if h0 is None else h0
    return hs, (x, hs, fs, cs, h_init)


def gated_cell_backward(dhs, cache, W, U):
    x, hs, fs, cs, h_init = cache
    T, H = hs.shape
    da = np.zeros((T, 2 * H))
    dh_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h_init
        dh = dhs[t] + dh_next
        f, c = fs[t], cs[t]
        df = dh * (c - h_prev)
        dc = dh * f
        da[t, :H] = df * f * (1.0 - f)
        da[t, H:] = dc * (1.0 - c * c)
        dh_next = dh * (1.0 - f) + da[t] @ U.T
    h_prevs = np.vstack([h_init[None, :], hs[:-1]])
    dW = x.T @ da
    dU = h_prevs.T @ da
    db = da.sum(axis=0)
    dx = da @ W.T
    return dx, dW, dU, db


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def layernorm_backward(dy, cache, g):
    xhat, inv = cache
    D = xhat.shape[-1]
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / D)
    flat = (-1, D)
    dg = (dy * xhat).reshape(flat).sum(axis=0)
    db = dy.reshape(flat).sum(axis=0)
    return dx, dg, db


def log_softmax_backward(dlogp, logp):
    """Gradient w.r.t. logits given the gradient w.r.t. log-softmax output."""
    return dlogp - np.exp(logp) * dlogp.sum(axis=-1, keepdims=True)

"""Numpy building blocks with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)`` and returns the input gradient plus a dict of
parameter gradients. Arrays are batched: tokens have shape (B, L, d).
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def softmax(x, axis=-1):
    """Softmax with max-subtraction so large logits cannot overflow."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def attention(Qm, Km, Vm):
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    Works on (L, d) matrices or any leading batch dimensions.
    """
    Qm, Km, Vm = (np.asarray(a, dtype=float) for a in (Qm, Km, Vm))
    if Qm.shape[-1] != Km.shape[-1] or Km.shape[-2] != Vm.shape[-2]:
        raise ValueError(f"shape mismatch: Q {Qm.shape}, K {Km.shape}, V {Vm.shape}")
    for a in (Qm, Km, Vm):
        if not np.all(np.isfinite(a)):
            raise ValueError("attention inputs must be finite")
    weights = attention_weights(Qm, Km)
    return weights @ Vm


def attention_weights(Qm, Km):
    dk = Qm.shape[-1]
    return softmax(Qm @ np.swapaxes(Km, -1, -2) / np.sqrt(dk))


# --- linear ---------------------------------------------------------------


def linear_forward(x, W, b=None):
    out = x @ W
    if b is not None:
        out = out + b
    return out, x


def linear_backward(dout, x, W, with_bias=True):
    dx = dout @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"W": x2.T @ d2}
    if with_bias:
        grads["b"] = d2.sum(axis=0)
    return dx, grads


# --- layer norm -----------------------------------------------------------


def layernorm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dout, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    d2 = dout.reshape(-1, d)
    grads = {"g": (d2 * xhat.reshape(-1, d)).sum(axis=0), "b": d2.sum(axis=0)}
    dxhat = dout * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, grads


# --- multi-head self attention -------------------------------------------


def _split_heads(x, n_heads):
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, L, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dk)


def mha_forward(x, p, n_heads):
    """Self attention over the token axis; ``p`` holds Wq, Wk, Wv, Wo."""
    q = _split_heads(x @ p["Wq"], n_heads)
    k = _split_heads(x @ p["Wk"], n_heads)
    v = _split_heads(x @ p["Wv"], n_heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    A = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    ctx = _merge_heads(A @ v)
    return ctx @ p["Wo"], (x, q, k, v, A, ctx, scale)


def mha_backward(dout, cache, p, n_heads):
    x, q, k, v, A, ctx, scale = cache
    d = x.shape[-1]
    grads = {"Wo": ctx.reshape(-1, d).T @ dout.reshape(-1, d)}
    dctx = _split_heads(dout @ p["Wo"].T, n_heads)
    dA = dctx @ v.transpose(0, 1, 3, 2)
    dv = A.transpose(0, 1, 3, 2) @ dctx
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) * scale
    dq = dS @ k
    dk = dS.transpose(0, 1, 3, 2) @ q
    x2 = x.reshape(-1, d)
    dx = np.zeros_like(x)
    for name, dh in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
        dm = _merge_heads(dh)
        grads[name] = x2.T @ dm.reshape(-1, d)
        dx += dm @ p[name].T
    return dx, grads


# --- encoder layer (post-norm) -------------------------------------------


def encoder_layer_forward(x, p, n_heads):
    a, c_att = mha_forward(x, p, n_heads)
    h1, c_ln1 = layernorm_forward(x + a, p["ln1_g"], p["ln1_b"])
    z1 = h1 @ p["ff_W1"] + p["ff_b1"]
    r = np.maximum(z1, 0.0)
    f = r @ p["ff_W2"] + p["ff_b2"]
    h2, c_ln2 = layernorm_forward(h1 + f, p["ln2_g"], p["ln2_b"])
    return h2, (c_att, c_ln1, h1, z1, r, c_ln2)


def encoder_layer_backward(dout, cache, p, n_heads):
    c_att, c_ln1, h1, z1, r, c_ln2 = cache
    grads = {}
    ds2, g = layernorm_backward(dout, c_ln2)
    grads["ln2_g"], grads["ln2_b"] = g["g"], g["b"]
    dr, g = linear_backward(ds2, r, p["ff_W2"])
    grads["ff_W2"], grads["ff_b2"] = g["W"], g["b"]
    dz1 = dr * (z1 > 0)
    dh1, g = linear_backward(dz1, h1, p["ff_W1"])
    grads["ff_W1"], grads["ff_b1"] = g["W"], g["b"]
    dh1 = dh1 + ds2
    ds1, g = layernorm_backward(dh1, c_ln1)
    grads["ln1_g"], grads["ln1_b"] = g["g"], g["b"]
    dx, g = mha_backward(ds1, c_att, p, n_heads)
    grads.update(g)
    return dx + ds1, grads

"""Independent reference implementations used by the tests."""

import math

import numpy as np

from mpcx.predictor.model import backward_batch, forward_batch, init_model
from mpcx.predictor.train import loss_and_grad


def naive_attention(Qm, Km, Vm):
    """Double loop over query/key pairs with scalar arithmetic."""
    L, dk = Qm.shape
    out = np.zeros((L, Vm.shape[1]))
    for i in range(L):
        scores = [sum(Qm[i, t] * Km[j, t] for t in range(dk)) / math.sqrt(dk)
                  for j in range(Km.shape[0])]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        total = sum(w)
        for j in range(Km.shape[0]):
            out[i] += (w[j] / total) * Vm[j]
    return out


def tiny_model(arch, head, seed=0, L=3, d_in=4, out_dim=5):
    hyper = {"d_model": 4, "n_heads": 2, "n_layers": 2, "d_ff": 6, "mlp_hidden": 5}
    model = init_model(arch, head, L, d_in, out_dim, hyper, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # perturb gains and biases away from their init values so every term is exercised
    for v in model.params.values():
        v += rng.normal(0.0, 0.1, size=v.shape)
    if head == "warmstart":
        model.out_scale = rng.uniform(0.5, 2.0, size=out_dim)
    return model


def gradient_check(model, X, Y, loss="mse", eps=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    Returns ``{param_name: relative_error}``.
    """
    def total_loss():
        out, _ = forward_batch(model, X)
        return loss_and_grad(out, Y, loss, model.head, scale=model.out_scale)[0]

    out, cache = forward_batch(model, X)
    _, dout = loss_and_grad(out, Y, loss, model.head, scale=model.out_scale)
    grads = backward_batch(model, cache, dout)
    errors = {}
    for name, W in model.params.items():
        numeric = np.zeros_like(W)
        flat, nflat = W.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = total_loss()
            flat[i] = keep - eps
            down = total_loss()
            flat[i] = keep
            nflat[i] = (up - down) / (2 * eps)
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(grads[name])), 1e-8)
        errors[name] = float(np.max(np.abs(grads[name] - numeric)) / scale)
    return errors

"""Predictor stack: linear encoder, positional table, encoder layers, linear decoder.

The same container also holds the two baselines (an MLP and logistic
regression on the flattened token matrix) so that training, evaluation and
file I/O share one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..problem import MpcInstance
from . import nn

FORMAT_VERSION = 1
ARCHS = ("transformer", "mlp", "logreg")
HEADS = ("constraint", "warmstart")

DEFAULT_HYPER = {
    "d_model": 64,
    "n_heads": 4,
    "n_layers": 2,
    "d_ff": 128,
    "mlp_hidden": 128,
    "positional": "learned",
}


class ModelFormatError(ValueError):
    pass


@dataclass
class PredictorModel:
    arch: str
    head: str
    hyper: dict
    params: dict
    output_dim: int
    seq_len: int
    d_in: int
    scenario: str = ""
    catalog_digest: str = ""
    feat_mean: np.ndarray = None
    feat_scale: np.ndarray = None
    out_scale: np.ndarray = None
    _pos_fixed: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.feat_mean is None:
            self.feat_mean = np.zeros(self.d_in)
        if self.feat_scale is None:
            self.feat_scale = np.ones(self.d_in)
        if self.out_scale is None:
            self.out_scale = np.ones(self.output_dim)
        check_shapes(self)

    @property
    def n_heads(self) -> int:
        return int(self.hyper["n_heads"])

    def layer(self, i: int) -> dict:
        prefix = f"layer{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def positional(self):
        if self.hyper.get("positional", "learned") == "learned":
            return self.params["pos"]
        if self._pos_fixed is None:
            self._pos_fixed = sinusoidal_table(self.seq_len, int(self.hyper["d_model"]))
        return self._pos_fixed

    def normalize(self, tokens):
        return (np.asarray(tokens, dtype=float) - self.feat_mean) / self.feat_scale


def sinusoidal_table(L, d):
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def param_shapes(arch, seq_len, d_in, output_dim, hyper) -> dict:
    if arch == "logreg":
        return {"dec_W": (seq_len * d_in, output_dim), "dec_b": (output_dim,)}
    if arch == "mlp":
        h = int(hyper["mlp_hidden"])
        return {"mlp0_W": (seq_len * d_in, h), "mlp0_b": (h,),
                "mlp1_W": (h, h), "mlp1_b": (h,),
                "dec_W": (h, output_dim), "dec_b": (output_dim,)}
    if arch != "transformer":
        raise ValueError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    d, f = int(hyper["d_model"]), int(hyper["d_ff"])
    if d % int(hyper["n_heads"]):
        raise ValueError(f"d_model={d} is not divisible by n_heads={hyper['n_heads']}")
    shapes = {"enc_W": (d_in, d), "enc_b": (d,)}
    if hyper.get("positional", "learned") == "learned":
        shapes["pos"] = (seq_len, d)
    for i in range(int(hyper["n_layers"])):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"layer{i}.{w}"] = (d, d)
        shapes[f"layer{i}.ln1_g"] = (d,)
        shapes[f"layer{i}.ln1_b"] = (d,)
        shapes[f"layer{i}.ff_W1"] = (d, f)
        shapes[f"layer{i}.ff_b1"] = (f,)
        shapes[f"layer{i}.ff_W2"] = (f, d)
        shapes[f"layer{i}.ff_b2"] = (d,)
        shapes[f"layer{i}.ln2_g"] = (d,)
        shapes[f"layer{i}.ln2_b"] = (d,)
    shapes["dec_W"] = (seq_len * d, output_dim)
    shapes["dec_b"] = (output_dim,)
    return shapes


def check_shapes(model: PredictorModel) -> None:
    if model.head not in HEADS:
        raise ValueError(f"unknown head {model.head!r}; expected one of {HEADS}")
    expected = param_shapes(model.arch, model.seq_len, model.d_in, model.output_dim, model.hyper)
    if set(expected) != set(model.params):
        missing = sorted(set(expected) - set(model.params))
        extra = sorted(set(model.params) - set(expected))
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for k, shape in expected.items():
        if model.params[k].shape != tuple(shape):
            raise ValueError(f"{k} has shape {model.params[k].shape}, expected {tuple(shape)}")


def init_model(arch, head, seq_len, d_in, output_dim, hyper=None, seed=0, **meta) -> PredictorModel:
    """Glorot-uniform weights, unit layer-norm gains, zero biases."""
    hyper = {**DEFAULT_HYPER, **(hyper or {})}
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch, seq_len, d_in, output_dim, hyper).items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            params[name] = np.ones(shape)
        elif short == "pos":
            params[name] = rng.normal(0.0, 0.1, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
    return PredictorModel(arch, head, hyper, params, output_dim, seq_len, d_in, **meta)


def zero_model(arch, head, seq_len, d_in, output_dim, hyper=None) -> PredictorModel:
    model = init_model(arch, head, seq_len, d_in, output_dim, hyper)
    for v in model.params.values():
        v[...] = 0.0
    return model


# ---------------------------------------------------------------------------
# inputs


def encode_inputs(instance: MpcInstance, model: PredictorModel | None = None) -> np.ndarray:
    """Token matrix with one row per stage: ``[x0 | x_ref_k]``, k = 0..N.

    Raw features; standardization happens inside the model.
    """
    x0 = np.asarray(instance.x0, dtype=float)
    ref = np.asarray(instance.x_ref, dtype=float)
    tokens = np.hstack([np.broadcast_to(x0, (ref.shape[0], x0.shape[0])), ref])
    if not np.all(np.isfinite(tokens)):
        raise ValueError("non-finite values in instance parameters")
    if model is not None and tokens.shape != (model.seq_len, model.d_in):
        raise ValueError(f"token matrix {tokens.shape} does not fit model "
                         f"({model.seq_len} positions, {model.d_in} features)")
    return tokens


# ---------------------------------------------------------------------------
# forward / backward


def forward_batch(model: PredictorModel, X):
    """Outputs for a batch of normalized token matrices ``X`` (B, L, d_in)."""
    p = model.params
    B = X.shape[0]
    cache = {"X": X}
    if model.arch == "logreg":
        h = X.reshape(B, -1)
        cache["flat"] = h
    elif model.arch == "mlp":
        x0 = X.reshape(B, -1)
        z0 = x0 @ p["mlp0_W"] + p["mlp0_b"]
        r0 = np.maximum(z0, 0.0)
        z1 = r0 @ p["mlp1_W"] + p["mlp1_b"]
        h = np.maximum(z1, 0.0)
        cache.update(x0=x0, z0=z0, r0=r0, z1=z1, flat=h)
    else:
        h = X @ p["enc_W"] + p["enc_b"] + model.positional()
        layer_caches = []
        for i in range(int(model.hyper["n_layers"])):
            h, c = nn.encoder_layer_forward(h, model.layer(i), model.n_heads)
            layer_caches.append(c)
        cache["layers"] = layer_caches
        cache["seq"] = h
        h = h.reshape(B, -1)
        cache["flat"] = h
    z = h @ p["dec_W"] + p["dec_b"]
    if model.head == "constraint":
        out = nn.sigmoid(z)
    else:
        out = z * model.out_scale
    cache["out"] = out
    return out, cache


def backward_batch(model: PredictorModel, cache, dout) -> dict:
    """Parameter gradients given d(loss)/d(outputs)."""
    p = model.params
    out = cache["out"]
    if model.head == "constraint":
        dz = dout * out * (1.0 - out)
    else:
        dz = dout * model.out_scale
    flat = cache["flat"]
    grads = {"dec_W": flat.T @ dz, "dec_b": dz.sum(axis=0)}
    dh = dz @ p["dec_W"].T
    if model.arch == "logreg":
        return grads
    if model.arch == "mlp":
        dz1 = dh * (cache["z1"] > 0)
        grads["mlp1_W"] = cache["r0"].T @ dz1
        grads["mlp1_b"] = dz1.sum(axis=0)
        dz0 = (dz1 @ p["mlp1_W"].T) * (cache["z0"] > 0)
        grads["mlp0_W"] = cache["x0"].T @ dz0
        grads["mlp0_b"] = dz0.sum(axis=0)
        return grads
    dseq = dh.reshape(cache["seq"].shape)
    for i in reversed(range(int(model.hyper["n_layers"]))):
        dseq, g = nn.encoder_layer_backward(dseq, cache["layers"][i], model.layer(i), model.n_heads)
        for k, v in g.items():
            grads[f"layer{i}.{k}"] = v
    if "pos" in p:
        grads["pos"] = dseq.sum(axis=0)
    X = cache["X"]
    grads["enc_W"] = X.reshape(-1, X.shape[-1]).T @ dseq.reshape(-1, dseq.shape[-1])
    grads["enc_b"] = dseq.reshape(-1, dseq.shape[-1]).sum(axis=0)
    return grads


def forward(model: PredictorModel, tokens) -> np.ndarray:
    """Scores in [0, 1] (constraint head) or a control sequence (warm-start head)."""
    tokens = np.asarray(tokens, dtype=float)
    if tokens.shape != (model.seq_len, model.d_in):
        raise ValueError(f"tokens have shape {tokens.shape}, model expects "
                         f"{(model.seq_len, model.d_in)}")
    out, _ = forward_batch(model, model.normalize(tokens)[None])
    return out[0]


def predict(model: PredictorModel, instance: MpcInstance) -> np.ndarray:
    return forward(model, encode_inputs(instance, model))


# ---------------------------------------------------------------------------
# files


def model_to_dict(model: PredictorModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "head": model.head,
        "hyper": dict(model.hyper),
        "scenario": model.scenario,
        "catalog_digest": model.catalog_digest,
        "seq_len": model.seq_len,
        "d_in": model.d_in,
        "output_dim": model.output_dim,
        "normalization": {
            "feat_mean": model.feat_mean.tolist(),
            "feat_scale": model.feat_scale.tolist(),
            "out_scale": model.out_scale.tolist(),
        },
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "weights": {k: v.ravel().tolist() for k, v in model.params.items()},
    }


def model_from_dict(d: dict) -> PredictorModel:
    try:
        if d["format_version"] != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model format_version {d['format_version']}")
        params = {k: np.asarray(d["weights"][k], dtype=np.float64).reshape(d["shapes"][k])
                  for k in d["weights"]}
        norm = d["normalization"]
        return PredictorModel(
            d["arch"], d["head"], d["hyper"], params, int(d["output_dim"]), int(d["seq_len"]),
            int(d["d_in"]), scenario=d.get("scenario", ""),
            catalog_digest=d.get("catalog_digest", ""),
            feat_mean=np.asarray(norm["feat_mean"], dtype=float),
            feat_scale=np.asarray(norm["feat_scale"], dtype=float),
            out_scale=np.asarray(norm["out_scale"], dtype=float),
        )
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model data: {exc}") from exc


def save_model(model: PredictorModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model_to_dict(model), fh, separators=(",", ":"), allow_nan=False)
        fh.write("\n")


def load_model(path) -> PredictorModel:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(d)

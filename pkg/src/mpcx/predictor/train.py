"""Mini-batch training, thresholding and evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .model import (
    DEFAULT_HYPER,
    PredictorModel,
    backward_batch,
    encode_inputs,
    forward_batch,
    init_model,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class DigestMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    loss: str = "mse"
    reduction: str = "record"
    seed: int = 0
    tau: float = 0.5
    prior_bias: bool = True
    d_model: int = DEFAULT_HYPER["d_model"]
    n_heads: int = DEFAULT_HYPER["n_heads"]
    n_layers: int = DEFAULT_HYPER["n_layers"]
    d_ff: int = DEFAULT_HYPER["d_ff"]
    mlp_hidden: int = DEFAULT_HYPER["mlp_hidden"]
    positional: str = DEFAULT_HYPER["positional"]

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = d or {}
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in DEFAULT_HYPER}


@dataclass
class TrainReport:
    arch: str
    head: str
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    train_metrics: dict = field(default_factory=dict)
    elapsed: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def threshold_labels(scores, tau: float = 0.5) -> np.ndarray:
    """1 where score >= tau; ties go to active."""
    return (np.asarray(scores) >= tau).astype(np.int8)


def stack_tokens(records) -> np.ndarray:
    return np.stack([encode_inputs(r.instance) for r in records])


def stack_targets(records, head: str) -> np.ndarray:
    if head == "constraint":
        return np.stack([r.label for r in records]).astype(float)
    return np.stack([r.u_star for r in records]).astype(float)


REDUCTIONS = ("record", "entry")


def loss_and_grad(out, target, kind: str, head: str, reduction: str = "record", scale=None):
    """Loss and its gradient w.r.t. the outputs.

    ``record`` sums the per-output terms and averages over records;
    ``entry`` averages over every output of every record. For the
    warm-start head, ``scale`` standardizes the error per output.
    """
    diff = out - target
    if reduction == "record":
        count = diff.shape[0]
    elif reduction == "entry":
        count = diff.size
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if head == "warmstart":
        w = 1.0 if scale is None else 1.0 / np.asarray(scale) ** 2
        return float(np.sum(w * diff * diff) / count), 2.0 * w * diff / count
    if kind == "mse":
        return float(np.sum(diff * diff) / count), 2.0 * diff / count
    if kind == "bce":
        s = np.clip(out, 1e-12, 1.0 - 1e-12)
        loss = -np.sum(target * np.log(s) + (1.0 - target) * np.log(1.0 - s)) / count
        # composed with the sigmoid derivative this yields (s - t) / count
        return float(loss), diff / (s * (1.0 - s)) / count
    raise ValueError(f"unknown loss {kind!r}")


def predict_batch(model: PredictorModel, tokens, batch: int = 512) -> np.ndarray:
    X = model.normalize(tokens)
    outs = [forward_batch(model, X[i:i + batch])[0] for i in range(0, len(X), batch)]
    return np.concatenate(outs) if outs else np.zeros((0, model.output_dim))


def _check_digests(train_set, test_set):
    digests = {r.instance.catalog.digest() for r in list(train_set) + list(test_set)}
    if len(digests) != 1:
        raise DigestMismatch(f"records span {len(digests)} catalog layouts")
    return digests.pop()


def train(train_set, test_set, arch: str = "transformer", head: str = "constraint",
          cfg: TrainConfig | None = None):
    """Fit a predictor by momentum SGD on the squared error.

    Returns ``(model, report)``. Deterministic for a fixed ``cfg.seed``.
    """
    cfg = cfg or TrainConfig()
    if not train_set or not test_set:
        raise ValueError("train and test sets must be nonempty")
    digest = _check_digests(train_set, test_set)
    t0 = time.perf_counter()

    Xtr_raw, Xte_raw = stack_tokens(train_set), stack_tokens(test_set)
    Ytr, Yte = stack_targets(train_set, head), stack_targets(test_set, head)
    feats = Xtr_raw.reshape(-1, Xtr_raw.shape[-1])
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale < 1e-12] = 1.0
    L, d_in = Xtr_raw.shape[1:]
    out_dim = Ytr.shape[1]
    out_scale = None
    if head == "warmstart":
        out_scale = np.maximum(Ytr.std(axis=0), 1e-3)

    model = init_model(arch, head, L, d_in, out_dim, cfg.hyper(), seed=cfg.seed,
                       scenario=train_set[0].instance.scenario, catalog_digest=digest,
                       feat_mean=mean, feat_scale=scale, out_scale=out_scale)
    if head == "constraint" and cfg.prior_bias:
        prior = np.clip(Ytr.mean(axis=0), 0.01, 0.99)
        model.params["dec_b"][:] = np.log(prior / (1.0 - prior))
    elif head == "warmstart":
        model.params["dec_b"][:] = Ytr.mean(axis=0) / model.out_scale

    Xtr, Xte = model.normalize(Xtr_raw), model.normalize(Xte_raw)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(arch, head, config=asdict(cfg))
    n = len(Xtr)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = forward_batch(model, Xtr[idx])
            loss, dout = loss_and_grad(out, Ytr[idx], cfg.loss, head, cfg.reduction,
                                       model.out_scale)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}")
            grads = backward_batch(model, cache, dout)
            for k, g in grads.items():
                v = velocity[k]
                v *= cfg.momentum
                v -= cfg.lr * g
                model.params[k] += v
            total += loss * len(idx)
        train_loss = total / n
        test_out = np.concatenate([forward_batch(model, Xte[i:i + 512])[0]
                                   for i in range(0, len(Xte), 512)])
        test_loss, _ = loss_and_grad(test_out, Yte, cfg.loss, head, cfg.reduction, model.out_scale)
        if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
            raise TrainingDiverged(f"non-finite loss after epoch {epoch}")
        report.train_loss.append(train_loss)
        report.test_loss.append(test_loss)
        log.info("epoch %d train %.6g test %.6g", epoch, train_loss, test_loss)

    train_out = np.concatenate([forward_batch(model, Xtr[i:i + 512])[0] for i in range(0, n, 512)])
    if head == "constraint":
        report.metrics = label_metrics(threshold_labels(test_out, cfg.tau), Yte)
        report.train_metrics = label_metrics(threshold_labels(train_out, cfg.tau), Ytr)
    else:
        report.metrics = warmstart_metrics(test_out, Yte)
        report.train_metrics = warmstart_metrics(train_out, Ytr)
    report.elapsed = time.perf_counter() - t0
    return model, report


def label_metrics(pred, true) -> dict:
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    n_active = true.sum()
    return {
        "exact_set_accuracy": float(np.mean(np.all(pred == true, axis=1))),
        "per_bit_accuracy": float(np.mean(pred == true)),
        "false_inactive_rate": float((true & ~pred).sum() / n_active) if n_active else 0.0,
        "mean_inactive_removed_fraction": float(np.mean(~pred)),
    }


def warmstart_metrics(pred, true) -> dict:
    err = np.abs(np.asarray(pred) - np.asarray(true))
    return {"mean_u_error": float(err.mean()), "max_u_error": float(err.max())}


def evaluate(model: PredictorModel, test_set, tau: float = 0.5) -> dict:
    """Active-set metrics of a constraint-head model on labeled records."""
    if model.head != "constraint":
        raise ValueError(f"evaluate needs a constraint-head model, got {model.head!r}")
    scores = predict_batch(model, stack_tokens(test_set))
    return label_metrics(threshold_labels(scores, tau), stack_targets(test_set, "constraint"))

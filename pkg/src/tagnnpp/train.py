"""Training loop: cross-entropy, Adam with L2 and step decay, adaptive
gradient clipping, per-epoch validation and checkpoints."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor
from .data import make_batches
from .errors import ConfigError, NumericError, TrainingDiverged
from .metrics import hit_rate_from_ranks, mrr_from_ranks, predict_ranks
from .model import save_checkpoint

log = logging.getLogger(__name__)

# parameters never clipped by AGC: the item table and the final fusion map
AGC_EXEMPT = ("embedding", "fusion.W")


@dataclass
class TrainConfig:
    batch_size: int = 50
    epochs: int = 15
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int = 3
    l2: float = 1e-6
    agc_enabled: bool = True
    agc_lambda: float = 0.02
    agc_eps: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def problems(self):
        out = []
        for name in ("batch_size", "epochs", "decay_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(f"{name}: must be a positive integer, got {value!r}")
        for name in ("lr", "decay_factor", "agc_lambda", "agc_eps", "adam_eps"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                out.append(f"{name}: must be positive, got {value!r}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0 <= value < 1:
                out.append(f"{name}: must lie in [0, 1), got {value!r}")
        if not isinstance(self.l2, (int, float)) or self.l2 < 0:
            out.append(f"l2: must be non-negative, got {self.l2!r}")
        if not isinstance(self.val_fraction, (int, float)) or not 0 <= self.val_fraction < 1:
            out.append(f"val_fraction: must lie in [0, 1), got {self.val_fraction!r}")
        if not isinstance(self.agc_enabled, bool):
            out.append("agc_enabled: must be true or false")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            out.append(f"seed: must be an integer, got {self.seed!r}")
        if self.dtype not in ("float32", "float64"):
            out.append(f"dtype: must be float32 or float64, got {self.dtype!r}")
        return out

    def validate(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of 1-based ``labels`` under ``logits [B, M]``."""
    labels = np.asarray(labels, dtype=np.int64)
    B, M = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 1 or labels.max() > M:
        raise IndexError(f"labels must lie in [1, {M}]")
    cols = labels - 1
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), cols].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(B), cols] -= 1.0
        return (d * (g / B),)

    return ag._make(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


def lr_schedule(epoch, lr0=1e-4, decay_factor=0.1, decay_every=3):
    """Step decay on 0-based epochs: ``lr0 * decay_factor ** (epoch // decay_every)``.

    Rounded to 12 significant digits so that e.g. epoch 14 gives exactly 1e-8
    rather than a value one ulp off.
    """
    value = lr0 * decay_factor ** (epoch // decay_every)
    return float(f"{value:.12g}")


def unit_norms(x):
    """Frobenius norm per unit: over fan-in for matrices, whole array for vectors."""
    x = np.asarray(x)
    if x.ndim <= 1:
        return np.sqrt(np.sum(x * x))
    return np.sqrt(np.sum(x * x, axis=tuple(range(x.ndim - 1)), keepdims=True))


def agc_clip(grads, params, lam=0.02, eps=1e-3, exempt=AGC_EXEMPT):
    """Adaptive gradient clipping.

    Each unit whose gradient norm exceeds ``lam * max(|w|, eps)`` is rescaled
    to exactly that norm; other units are returned untouched.
    """
    out = {}
    for name, g in grads.items():
        if name in exempt:
            out[name] = g
            continue
        w = params[name]
        w = w.data if isinstance(w, Tensor) else np.asarray(w)
        max_norm = lam * np.maximum(unit_norms(w), eps)
        g_norm = unit_norms(g)
        over = g_norm > max_norm
        if not np.any(over):
            out[name] = g
            continue
        scale = np.where(over, max_norm / np.where(over, g_norm, 1.0), 1.0)
        out[name] = np.where(over, g * scale, g).astype(g.dtype, copy=False)
    return out


class Adam:
    """Classic Adam; the L2 penalty is added to the gradient before the moments."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads, lr, l2=0.0):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if l2:
                g = g + l2 * p.data
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)


def split_validation(examples, rng, fraction=0.1):
    """Shuffle under ``rng``; the last ``fraction`` becomes validation data."""
    order = rng.permutation(len(examples))
    n_val = int(round(len(examples) * fraction))
    cut = len(examples) - n_val
    return [examples[i] for i in order[:cut]], [examples[i] for i in order[cut:]]


def compute_gradients(model, batch, rng=None, training=True):
    """Forward + backward on one batch; returns ``(loss, {name: grad})``."""
    params = model.parameters()
    for p in params.values():
        p.grad = None
    loss = cross_entropy(model(batch, rng, training), batch.labels)
    ag.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    grads["embedding"][0] = 0  # padding row stays frozen at zero
    return float(loss.data), grads


def train_step(model, batch, opt, cfg, lr, rng=None):
    loss, grads = compute_gradients(model, batch, rng)
    if cfg.agc_enabled:
        grads = agc_clip(grads, model.parameters(), cfg.agc_lambda, cfg.agc_eps)
    opt.step(grads, lr, cfg.l2)
    return loss


def _dump_divergence(run_dir, epoch, batch_no, batch, reason):
    info = {
        "epoch": epoch,
        "batch": batch_no,
        "example_index": batch.index.tolist(),
        "reason": reason,
    }
    if run_dir is not None:
        Path(run_dir, "diverged.json").write_text(json.dumps(info, indent=2) + "\n")
    return info


def fit(model, examples, cfg, run_dir=None, val_examples=None, eval_n=20, callback=None):
    """Train ``model`` in place and return the per-epoch metric records.

    Unless ``val_examples`` is given, ``cfg.val_fraction`` of ``examples`` is
    held out for validation.  With ``run_dir`` set, each epoch appends to
    ``metrics.jsonl`` (deterministic fields) and ``timing.jsonl`` (wall time)
    and writes ``ckpt-epoch{N}.bin``.
    """
    cfg.validate()
    root = Rng(cfg.seed)
    if val_examples is None:
        train_ex, val_ex = split_validation(examples, root.child(3), cfg.val_fraction)
    else:
        train_ex, val_ex = list(examples), list(val_examples)
    if not train_ex:
        raise ConfigError("no training examples")
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    history = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_schedule(epoch, cfg.lr, cfg.decay_factor, cfg.decay_every)
        shuffle_rng, drop_rng = root.child(1, epoch), root.child(2, epoch)
        total, count = 0.0, 0
        for batch_no, batch in enumerate(make_batches(train_ex, cfg.batch_size, shuffle_rng)):
            try:
                loss = train_step(model, batch, opt, cfg, lr, drop_rng)
            except NumericError as exc:
                _dump_divergence(run_dir, epoch, batch_no, batch, str(exc))
                raise TrainingDiverged(f"epoch {epoch} batch {batch_no}: {exc}", batch_no) from exc
            if not np.isfinite(loss):
                _dump_divergence(run_dir, epoch, batch_no, batch, "non-finite loss")
                raise TrainingDiverged(f"epoch {epoch} batch {batch_no}: loss is {loss}", batch_no)
            total += loss * len(batch)
            count += len(batch)
        record = {"epoch": epoch, "lr": lr, "train_loss": total / count}
        if val_ex:
            ranks, _, nll = predict_ranks(model, val_ex, max(cfg.batch_size, 100))
            record.update(
                val_loss=float(nll.mean()),
                val_hr20=hit_rate_from_ranks(ranks, eval_n),
                val_mrr20=mrr_from_ranks(ranks, eval_n),
            )
        else:
            record.update(val_loss=None, val_hr20=None, val_mrr20=None)
        wall_ms = int(round((time.perf_counter() - started) * 1000))
        history.append(record)
        log.info("epoch %d lr=%g train_loss=%.4f val_hr20=%s", epoch, lr, record["train_loss"], record["val_hr20"])
        if run_dir is not None:
            save_checkpoint(run_dir / f"ckpt-epoch{epoch}.bin", model, epoch, cfg.seed)
            with open(run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            with open(run_dir / "timing.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_ms": wall_ms}) + "\n")
        if callback is not None:
            callback(record)
    return history


def config_dict(cfg):
    return asdict(cfg)

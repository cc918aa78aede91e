"""TAGNN++: gated GNN over the session graph, a Transformer encoder over the
re-assembled sequence, and a target-attentive readout.

Weights use the row-vector convention throughout: a layer maps ``x`` to
``x @ W + b`` with ``W`` stored ``[fan_in, fan_out]``.
"""

from __future__ import annotations

import functools
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError

MASK_BIAS = -1e9
CKPT_MAGIC = b"SBRCKPT1"

# per-dataset defaults for embedding size and attention heads
PRESETS = {
    "yoochoose": {"d": 100, "heads": 2},
    "diginetica": {"d": 120, "heads": 8},
}


@dataclass
class ModelConfig:
    n_items: int
    d: int = 100
    heads: int = 2
    dropout: float = 0.1
    ggnn_steps: int = 1
    ffn_hidden: int = 0  # 0 means 4 * d
    blocks: int = 1
    use_gnn: bool = True
    use_transformer: bool = True
    use_pe: bool = True
    normalize_global: bool = False
    ln_eps: float = 1e-5

    @property
    def ffn_width(self):
        return self.ffn_hidden or 4 * self.d

    def problems(self):
        out = []
        for name in ("n_items", "d", "heads", "ggnn_steps", "blocks"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                out.append(f"{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.ffn_hidden, int) or self.ffn_hidden < 0:
            out.append(f"ffn_hidden: must be a non-negative integer, got {self.ffn_hidden!r}")
        if isinstance(self.d, int) and isinstance(self.heads, int) and self.heads > 0 and self.d % self.heads:
            out.append(f"heads: d={self.d} is not divisible by heads={self.heads}")
        if self.use_pe and isinstance(self.d, int) and self.d % 2:
            out.append(f"d: positional encoding needs an even dimension, got {self.d}")
        if not isinstance(self.dropout, (int, float)) or not 0 <= self.dropout < 1:
            out.append(f"dropout: must lie in [0, 1), got {self.dropout!r}")
        if not isinstance(self.ln_eps, (int, float)) or self.ln_eps <= 0:
            out.append(f"ln_eps: must be positive, got {self.ln_eps!r}")
        for name in ("use_gnn", "use_transformer", "use_pe", "normalize_global"):
            if not isinstance(getattr(self, name), bool):
                out.append(f"{name}: must be true or false")
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


# ------------------------------------------------------------- parameters


def parameter_specs(cfg):
    """Ordered ``(name, shape, kind)`` list; the order is the registry order."""
    d, M = cfg.d, cfg.n_items
    specs = [("embedding", (M + 1, d), "weight")]
    if cfg.use_gnn:
        specs += [
            ("ggnn.H_in", (d, d), "weight"),
            ("ggnn.b_in", (d,), "bias"),
            ("ggnn.H_out", (d, d), "weight"),
            ("ggnn.b_out", (d,), "bias"),
        ]
        for gate in ("z", "r", "o"):
            specs += [
                (f"ggnn.W_{gate}", (2 * d, d), "weight"),
                (f"ggnn.U_{gate}", (d, d), "weight"),
                (f"ggnn.b_{gate}", (d,), "bias"),
            ]
    if cfg.use_transformer:
        f = cfg.ffn_width
        for k in range(cfg.blocks):
            p = f"block{k}."
            for proj in ("q", "k", "v", "out"):
                specs += [(p + f"W_{proj}", (d, d), "weight"), (p + f"b_{proj}", (d,), "bias")]
            specs += [
                (p + "ln1.gamma", (d,), "gamma"),
                (p + "ln1.beta", (d,), "bias"),
                (p + "ffn.W_1", (d, f), "weight"),
                (p + "ffn.b_1", (f,), "bias"),
                (p + "ffn.W_2", (f, d), "weight"),
                (p + "ffn.b_2", (d,), "bias"),
                (p + "ln2.gamma", (d,), "gamma"),
                (p + "ln2.beta", (d,), "bias"),
            ]
    specs += [
        ("readout.W_1", (d, d), "weight"),
        ("readout.W_2", (d, d), "weight"),
        ("readout.c", (d,), "bias"),
        ("readout.q", (d,), "weight"),
        ("target.W", (d, d), "weight"),
        ("fusion.W", (3 * d, d), "weight"),
    ]
    return specs


def init_params(cfg, rng, dtype=np.float32):
    """Weights ~ U(-1/sqrt(d), 1/sqrt(d)); biases zero; LayerNorm gains one."""
    bound = 1.0 / math.sqrt(cfg.d)
    params = {}
    for name, shape, kind in parameter_specs(cfg):
        if kind == "weight":
            arr = rng.uniform(-bound, bound, shape, dtype=dtype)
        elif kind == "gamma":
            arr = np.ones(shape, dtype=dtype)
        else:
            arr = np.zeros(shape, dtype=dtype)
        if name == "embedding":
            arr[0] = 0
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def scope(params, prefix):
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def _const(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype))


# ----------------------------------------------------------------- layers


def ggnn_propagate(x, a_in, a_out, p, steps=1):
    """Gated graph propagation of node states ``x [B, n, d]``.

    ``a_in``/``a_out`` are ``[B, n, n]`` constants; ``p`` holds the ``H_*``,
    ``b_*``, ``W_*`` and ``U_*`` weights of one gated layer.
    """
    if steps < 1:
        raise ContractError("ggnn steps must be >= 1")
    n = x.shape[-2]
    if a_in.shape[-2:] != (n, n) or a_out.shape[-2:] != (n, n):
        raise DimensionError(f"adjacency {a_in.shape}/{a_out.shape} vs {n} nodes")
    for _ in range(steps):
        m = ag.concat(
            [a_in @ (x @ p["H_in"]) + p["b_in"], a_out @ (x @ p["H_out"]) + p["b_out"]], axis=-1
        )
        z = ag.sigmoid(m @ p["W_z"] + x @ p["U_z"] + p["b_z"])
        r = ag.sigmoid(m @ p["W_r"] + x @ p["U_r"] + p["b_r"])
        cand = ag.tanh(m @ p["W_o"] + (r * x) @ p["U_o"] + p["b_o"])
        x = (1.0 - z) * x + z * cand
    return x


@functools.lru_cache(maxsize=64)
def _pe_table(length, d):
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((length, d))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    pe.flags.writeable = False
    return pe


def positional_encoding(length, d):
    """Sinusoidal table ``[length, d]``: sin on even columns, cos on odd."""
    if d % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {d}")
    return _pe_table(int(length), int(d))


def assemble_sequence(node_states, alias, use_pe=False):
    """Scatter node states back into click order (``h[b, t] = x[b, alias[b, t]]``)."""
    h = ag.gather_rows(node_states, alias)
    if use_pe:
        L, d = h.shape[-2:]
        h = h + _const(positional_encoding(L, d), h.dtype)
    return h


def _mask_bias(mask, dtype):
    return np.where(mask, MASK_BIAS, 0.0).astype(dtype)


def multi_head_attention(h, mask, p, heads):
    """Scaled dot-product self-attention over ``h [B, L, d]``.

    ``mask [B, L]`` is True at padding: padded keys get a large negative
    bias and padded query rows are zeroed in the output.
    """
    B, L, d = h.shape
    if d % heads:
        raise DimensionError(f"d={d} not divisible by heads={heads}")
    mask = np.asarray(mask, dtype=bool)
    if mask.all(axis=-1).any():
        raise ContractError("attention row has every key masked")
    dk = d // heads

    def split(t):
        return ag.transpose(ag.reshape(t, (B, L, heads, dk)), (0, 2, 1, 3))

    q = split(h @ p["W_q"] + p["b_q"])
    k = split(h @ p["W_k"] + p["b_k"])
    v = split(h @ p["W_v"] + p["b_v"])
    scores = (q @ ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    scores = scores + _const(_mask_bias(mask, h.dtype)[:, None, None, :], h.dtype)
    attn = ag.softmax(scores, axis=-1)
    out = ag.reshape(ag.transpose(attn @ v, (0, 2, 1, 3)), (B, L, d))
    out = out @ p["W_out"] + p["b_out"]
    return out * _const((~mask)[..., None], h.dtype)


def feed_forward(u, p):
    return ag.relu(u @ p["ffn.W_1"] + p["ffn.b_1"]) @ p["ffn.W_2"] + p["ffn.b_2"]


def transformer_block(h, mask, p, heads, dropout_p=0.0, rng=None, training=False, eps=1e-5):
    """Post-norm encoder block: attention and feed-forward, each residual."""
    a = ag.dropout(multi_head_attention(h, mask, p, heads), dropout_p, training, rng)
    u = ag.layer_norm(h + a, p["ln1.gamma"], p["ln1.beta"], eps)
    f = ag.dropout(feed_forward(u, p), dropout_p, training, rng)
    return ag.layer_norm(u + f, p["ln2.gamma"], p["ln2.beta"], eps)


def readout(h, mask, p, normalize=False):
    """Local (last click) and attention-pooled global session embeddings.

    Returns ``(s_local, s_global)``, each ``[B, d]``.
    """
    mask = np.asarray(mask, dtype=bool)
    B, L, d = h.shape
    last = (L - 1 - np.argmax(~mask[:, ::-1], axis=1))[:, None]
    s_local = ag.gather_rows(h, last)  # [B, 1, d]
    gate = ag.sigmoid(s_local @ p["W_1"] + h @ p["W_2"] + p["c"])
    alpha = gate @ ag.reshape(p["q"], (d, 1))  # [B, L, 1]
    if normalize:
        alpha = ag.softmax(alpha + _const(_mask_bias(mask, h.dtype)[..., None], h.dtype), axis=1)
    alpha = alpha * _const((~mask)[..., None], h.dtype)
    s_global = ag.tensor_sum(alpha * h, axis=1)
    return ag.reshape(s_local, (B, d)), s_global


def target_attention_weights(h, mask, item_table, w_target):
    """``beta[b, t, v]``: softmax over unmasked t of ``e_v . (h_t @ W)``."""
    mask = np.asarray(mask, dtype=bool)
    scores = (h @ w_target) @ ag.transpose(item_table, (1, 0))  # [B, L, M]
    scores = scores + _const(_mask_bias(mask, h.dtype)[..., None], h.dtype)
    return ag.softmax(scores, axis=1)


def target_attentive_scores(h, mask, s_local, s_global, item_table, w_target, w_fusion):
    """Candidate logits ``[B, M]``.

    For candidate ``v`` the target embedding is ``sum_t beta[t, v] h_t`` and
    the logit is ``e_v . (concat(s_local, s_global, s_target(v)) @ W_fusion)``.
    The ``s_target`` term is evaluated as ``sum_t beta[t, v] e_v . (h_t @ W_c)``
    so no ``[B, M, d]`` tensor is ever formed.
    """
    d = h.shape[-1]
    E_t = ag.transpose(item_table, (1, 0))  # [d, M]
    w_local, w_global, w_tgt = w_fusion[0:d], w_fusion[d:2 * d], w_fusion[2 * d:3 * d]
    base = (s_local @ w_local + s_global @ w_global) @ E_t  # [B, M]
    beta = target_attention_weights(h, mask, item_table, w_target)
    per_pos = (h @ w_tgt) @ E_t  # [B, L, M]
    return base + ag.tensor_sum(beta * per_pos, axis=1)


# ------------------------------------------------------------------ model


class TAGNNPlusPlus:
    """Parameter registry plus the end-to-end forward pass."""

    def __init__(self, config, params):
        self.config = config.validate()
        expected = [(n, s) for n, s, _ in parameter_specs(config)]
        got = [(n, tuple(t.shape)) for n, t in params.items()]
        if expected != got:
            raise ConfigError("parameter registry does not match the model configuration")
        self.params = params

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        config.validate()
        return cls(config, init_params(config, ag.Rng(seed, (0,)), dtype))

    @property
    def dtype(self):
        return self.params["embedding"].dtype

    def parameters(self):
        return self.params

    def __call__(self, batch, rng=None, training=False):
        return self.forward(batch, rng, training)

    def encode(self, batch, rng=None, training=False):
        """Sequence states ``h [B, L, d]`` entering the readout."""
        cfg, p, dtype = self.config, self.params, self.dtype
        x = ag.embedding_lookup(p["embedding"], batch.node_ids)
        if cfg.use_gnn:
            x = ggnn_propagate(
                x, _const(batch.a_in, dtype), _const(batch.a_out, dtype), scope(p, "ggnn."), cfg.ggnn_steps
            )
        h = assemble_sequence(x, batch.alias, cfg.use_pe)
        if cfg.use_transformer:
            for k in range(cfg.blocks):
                h = transformer_block(
                    h, batch.mask, scope(p, f"block{k}."), cfg.heads, cfg.dropout, rng, training, cfg.ln_eps
                )
        return h

    def forward(self, batch, rng=None, training=False):
        p = self.params
        h = self.encode(batch, rng, training)
        s_local, s_global = readout(h, batch.mask, scope(p, "readout."), self.config.normalize_global)
        return target_attentive_scores(
            h, batch.mask, s_local, s_global, p["embedding"][1:], p["target.W"], p["fusion.W"]
        )

    def save(self, path, epoch=0, seed=0):
        save_checkpoint(path, self, epoch, seed)


# ------------------------------------------------------------- checkpoints


def checkpoint_bytes(model, epoch=0, seed=0):
    header = {
        "config": asdict(model.config),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
        "epoch": int(epoch),
        "seed": int(seed),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<Q", len(head)), head]
    chunks += [np.ascontiguousarray(t.data, dtype="<f4").tobytes() for t in model.params.values()]
    return b"".join(chunks)


def save_checkpoint(path, model, epoch=0, seed=0):
    Path(path).write_bytes(checkpoint_bytes(model, epoch, seed))


def load_checkpoint(path, dtype=np.float32):
    """Return ``(model, header)`` from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    pos = 16 + n
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        params[entry["name"]] = Tensor(arr.astype(dtype), requires_grad=True, name=entry["name"])
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    return TAGNNPlusPlus(cfg, params), header

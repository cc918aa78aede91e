"""Central finite-difference checks of the autodiff engine and the model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Rng, Tensor
from .data import LabeledExample, collate
from .model import (
    ModelConfig,
    TAGNNPlusPlus,
    assemble_sequence,
    ggnn_propagate,
    multi_head_attention,
    readout,
    target_attentive_scores,
    transformer_block,
)
from .train import compute_gradients, cross_entropy

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self):
        return self.error < self.tol


def relative_error(analytic, numeric, floor=1e-6):
    """``|a - n| / max(|a|, |n|, floor)`` in the 2-norm over the whole array.

    The floor keeps gradients that are zero by symmetry (e.g. a key bias under
    softmax) from turning finite-difference round-off into a relative error of 1.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_function(fn, inputs, seed=0, h=1e-5):
    """Worst relative error over ``inputs`` for the scalar ``sum(fn(*inputs) * w)``.

    ``w`` is a fixed random weighting so every output element matters.
    """
    inputs = [t for t in inputs]
    probe = fn(*inputs)
    w = Rng(seed, (99,)).normal(probe.shape)

    def scalar():
        with ag.no_grad():
            return float(np.sum(fn(*inputs).data * w))

    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    ag.backward(ag.tensor_sum(ag.mul(out, w)))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(scalar, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return worst


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def op_cases(seed=0):
    """``(name, fn, inputs)`` triples covering every differentiable primitive
    plus the model's composite layers, all at float64 with extents <= 5."""
    rng = Rng(seed, (1,))
    L = lambda *s, **kw: _leaf(rng, *s, **kw)  # noqa: E731
    ids = np.array([[0, 2, 2], [4, 1, 0]])
    alias = np.array([[0, 1, 1, 2], [2, 0, 1, 1]])
    cases = [
        ("matmul", ag.matmul, [L(3, 4), L(4, 2)]),
        ("matmul_batched", ag.matmul, [L(2, 3, 4), L(4, 5)]),
        ("add_broadcast", ag.add, [L(3, 4), L(4)]),
        ("sub", ag.sub, [L(3, 4), L(3, 1)]),
        ("mul_broadcast", ag.mul, [L(2, 3, 4), L(1, 3, 1)]),
        ("sigmoid", ag.sigmoid, [L(3, 4, low=-3, high=3)]),
        ("tanh", ag.tanh, [L(3, 4, low=-2, high=2)]),
        ("relu", ag.relu, [L(3, 4)]),
        ("exp", ag.exp, [L(3, 4)]),
        ("log", ag.log, [L(3, 4, low=0.5, high=2.0)]),
        ("softmax_last", lambda x: ag.softmax(x, -1), [L(3, 5, low=-2, high=2)]),
        ("softmax_axis1", lambda x: ag.softmax(x, 1), [L(2, 4, 3, low=-2, high=2)]),
        ("log_softmax", lambda x: ag.log_softmax(x, -1), [L(3, 5, low=-2, high=2)]),
        ("layer_norm", lambda x, g, b: ag.layer_norm(x, g, b, 1e-5), [L(2, 3, 5), L(5), L(5)]),
        ("dropout_fixed_mask", lambda x: ag.dropout(x, 0.3, True, Rng(5)), [L(4, 5)]),
        ("embedding_lookup", lambda t: ag.embedding_lookup(t, ids), [L(5, 3)]),
        ("gather_rows", lambda x: ag.gather_rows(x, alias), [L(2, 3, 4)]),
        ("concat", lambda a, b: ag.concat([a, b], -1), [L(2, 3), L(2, 5)]),
        ("sum_axis", lambda x: ag.tensor_sum(x, axis=1), [L(2, 3, 4)]),
        ("mean", lambda x: ag.mean(x, axis=0, keepdims=True), [L(3, 4)]),
        ("reshape", lambda x: ag.reshape(x, (4, 3)), [L(2, 6)]),
        ("transpose", lambda x: ag.transpose(x, (0, 2, 1)), [L(2, 3, 4)]),
        ("slice", lambda x: x[1:3], [L(4, 3)]),
        ("cross_entropy", lambda x: cross_entropy(x, np.array([1, 5, 3])), [L(3, 5, low=-2, high=2)]),
    ]
    cases += _layer_cases(rng)
    return cases


def _layer_cases(rng):
    d, B, n, Lq = 4, 2, 3, 4
    L = lambda *s: _leaf(rng, *s, low=-0.5, high=0.5)  # noqa: E731
    adj_in = Tensor(np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 0.5, 0.5], [1, 0, 0], [0, 0, 0]]], float))
    adj_out = Tensor(np.array([[[0, 1, 0], [0, 0, 1], [0, 0, 0]], [[0, 1, 0], [0.5, 0, 0.5], [1, 0, 0]]], float))
    ggnn = {"H_in": L(d, d), "b_in": L(d), "H_out": L(d, d), "b_out": L(d)}
    for gate in "zro":
        ggnn.update({f"W_{gate}": L(2 * d, d), f"U_{gate}": L(d, d), f"b_{gate}": L(d)})
    names = list(ggnn)

    def ggnn_fn(x, *ws):
        return ggnn_propagate(x, adj_in, adj_out, dict(zip(names, ws)), steps=2)

    block = {}
    for proj in ("q", "k", "v", "out"):
        block.update({f"W_{proj}": L(d, d), f"b_{proj}": L(d)})
    block.update({
        "ln1.gamma": L(d), "ln1.beta": L(d), "ffn.W_1": L(d, 5), "ffn.b_1": L(5),
        "ffn.W_2": L(5, d), "ffn.b_2": L(d), "ln2.gamma": L(d), "ln2.beta": L(d),
    })
    bnames = list(block)
    mask = np.array([[False, False, False, True], [False, False, False, False]])

    def mha_fn(h, *ws):
        return multi_head_attention(h, mask, dict(zip(bnames, ws)), heads=2)

    def block_fn(h, *ws):
        return transformer_block(h, mask, dict(zip(bnames, ws)), heads=2)

    rd = {"W_1": L(d, d), "W_2": L(d, d), "c": L(d), "q": L(d)}
    rnames = list(rd)

    def readout_fn(h, *ws):
        s_l, s_g = readout(h, mask, dict(zip(rnames, ws)))
        return ag.concat([s_l, s_g], -1)

    def scores_fn(h, s_l, s_g, table, wt, wf):
        return target_attentive_scores(h, mask, s_l, s_g, table, wt, wf)

    def assemble_fn(x):
        return assemble_sequence(x, np.array([[0, 1, 0, 2], [1, 1, 2, 0]]), use_pe=True)

    return [
        ("ggnn_propagate", ggnn_fn, [L(B, n, d), *ggnn.values()]),
        ("multi_head_attention", mha_fn, [L(B, Lq, d), *[block[k] for k in bnames]]),
        ("transformer_block", block_fn, [L(B, Lq, d), *block.values()]),
        ("assemble_sequence", assemble_fn, [L(B, n, d)]),
        ("readout", readout_fn, [L(B, Lq, d), *rd.values()]),
        ("target_attentive_scores", scores_fn, [L(B, Lq, d), L(B, d), L(B, d), L(5, d), L(d, d), L(3 * d, d)]),
    ]


def run_op_checks(seed=0):
    return [CheckResult(name, check_function(fn, inputs, seed), OP_TOL) for name, fn, inputs in op_cases(seed)]


def tiny_model_case(seed=0):
    """The M=7, d=4, heads=2, B=2 model and batch used for full-model checks."""
    cfg = ModelConfig(n_items=7, d=4, heads=2, dropout=0.0, ffn_hidden=6)
    model = TAGNNPlusPlus.initialize(cfg, seed=seed, dtype=np.float64)
    # spread the weights a little so no unit is near-degenerate
    rng = Rng(seed, (2,))
    for name, p in model.parameters().items():
        p.data = p.data + rng.uniform(-0.3, 0.3, p.shape)
        if name == "embedding":
            p.data[0] = 0
    batch = collate([LabeledExample((3, 5, 3, 1), 6), LabeledExample((2, 7), 4)])
    return model, batch


def run_model_check(seed=0, h=1e-5):
    """One result per parameter tensor of the tiny model."""
    model, batch = tiny_model_case(seed)
    _, grads = compute_gradients(model, batch, training=False)

    def loss():
        with ag.no_grad():
            return float(cross_entropy(model(batch), batch.labels).data)

    results = []
    for name, p in model.parameters().items():
        num = numeric_grad(loss, p.data, h)
        if name == "embedding":
            num[0] = 0
        results.append(CheckResult(f"model:{name}", relative_error(grads[name], num), MODEL_TOL))
    return results


def run_all(seed=0):
    return run_op_checks(seed) + run_model_check(seed)

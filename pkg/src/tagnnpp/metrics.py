"""Top-K ranking metrics and batched test-set evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import no_grad
from .errors import ConfigError, ContractError

# prefix-length buckets for the breakdown report (upper bounds, inclusive)
LENGTH_BUCKETS = (("short", 5), ("medium", 10), ("long", None))


def topk(logits, k):
    """The ``k`` best 1-based item indices; ties go to the lower index."""
    logits = np.asarray(logits)
    if k > logits.shape[-1]:
        raise ContractError(f"k={k} exceeds the number of items {logits.shape[-1]}")
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k] + 1


def label_ranks(logits, labels):
    """1-based rank of each label under the :func:`topk` ordering.

    ``logits`` is ``[B, M]`` and ``labels`` holds item indices in ``1..M``.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    M = logits.shape[-1]
    if labels.size and (labels.min() < 1 or labels.max() > M):
        raise IndexError(f"labels must lie in [1, {M}]")
    cols = labels - 1
    target = np.take_along_axis(logits, cols[:, None], axis=1)
    higher = (logits > target).sum(axis=1)
    tied_before = ((logits == target) & (np.arange(M)[None, :] < cols[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def _ranks_from_lists(ranked_lists, labels):
    ranks = []
    for ranked, label in zip(ranked_lists, labels):
        hits = np.flatnonzero(np.asarray(ranked) == label)
        ranks.append(int(hits[0]) + 1 if hits.size else np.inf)
    return np.asarray(ranks, dtype=np.float64)


def hit_rate_from_ranks(ranks, n):
    ranks = np.asarray(ranks, dtype=np.float64)
    return 100.0 * float(np.mean(ranks <= n)) if ranks.size else 0.0


def mrr_from_ranks(ranks, n):
    ranks = np.asarray(ranks, dtype=np.float64)
    if not ranks.size:
        return 0.0
    return 100.0 * float(np.mean(np.where(ranks <= n, 1.0 / ranks, 0.0)))


def hit_rate_at_n(ranked_lists, labels, n):
    """Percentage of examples whose label is within the first ``n`` entries."""
    return hit_rate_from_ranks(_ranks_from_lists(ranked_lists, labels), n)


def mrr_at_n(ranked_lists, labels, n):
    """Mean reciprocal rank (zero beyond ``n``), as a percentage."""
    return mrr_from_ranks(_ranks_from_lists(ranked_lists, labels), n)


@dataclass
class MetricsReport:
    n: int
    hr: float
    mrr: float
    example_count: int
    buckets: dict = field(default_factory=dict)
    model: str = "TAGNN++"
    dataset: str = ""

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _bucket_of(length):
    for name, upper in LENGTH_BUCKETS:
        if upper is None or length <= upper:
            return name


def report_from_ranks(ranks, lengths, n=20, model="TAGNN++", dataset=""):
    ranks = np.asarray(ranks, dtype=np.float64)
    lengths = np.asarray(lengths)
    names = np.array([_bucket_of(int(t)) for t in lengths]) if lengths.size else np.array([])
    buckets = {}
    for name, _ in LENGTH_BUCKETS:
        sel = ranks[names == name]
        buckets[name] = {
            "count": int(sel.size),
            "hr": hit_rate_from_ranks(sel, n),
            "mrr": mrr_from_ranks(sel, n),
        }
    return MetricsReport(
        n=n,
        hr=hit_rate_from_ranks(ranks, n),
        mrr=mrr_from_ranks(ranks, n),
        example_count=int(ranks.size),
        buckets=buckets,
        model=model,
        dataset=dataset,
    )


def predict_ranks(model, examples, batch_size=100):
    """Ranks of every label plus per-row mean loss terms (no dropout)."""
    from .data import make_batches

    ranks, lengths, nll = [], [], []
    with no_grad():
        for batch in make_batches(examples, batch_size):
            logits = model(batch, training=False).data.astype(np.float64)
            ranks.append(label_ranks(logits, batch.labels))
            lengths.append(batch.lengths)
            shifted = logits - logits.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1))
            nll.append(logz - shifted[np.arange(len(batch)), batch.labels - 1])
    if not ranks:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(ranks), np.concatenate(lengths), np.concatenate(nll)


def evaluate(model, examples, n=20, batch_size=100, n_items=None, dataset=""):
    """Score ``examples`` with dropout off and aggregate HR@n / MRR@n.

    ``n_items`` (the vocabulary size of the data) is checked against the
    model when given.
    """
    if n_items is not None and n_items != model.config.n_items:
        raise ConfigError(
            f"model was trained on {model.config.n_items} items but the data has {n_items}"
        )
    if n > model.config.n_items:
        raise ContractError(f"cutoff n={n} exceeds the number of items {model.config.n_items}")
    ranks, lengths, _ = predict_ranks(model, examples, batch_size)
    return report_from_ranks(ranks, lengths, n, dataset=dataset)


def emit_plot_data(reports):
    """CSV ``model,dataset,hr20,mrr20`` with one row per report."""
    if not reports:
        raise ContractError("need at least one report")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "dataset", "hr20", "mrr20"])
    for r in reports:
        writer.writerow([r.model, r.dataset, repr(float(r.hr)), repr(float(r.mrr))])
    return buf.getvalue()

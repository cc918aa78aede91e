"""Directed session graphs with degree-normalised in/out adjacency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True, eq=False)
class SessionGraph:
    """Unique items of a prefix plus its normalised transition matrices.

    ``a_out[i, j]`` is the weight of edge ``nodes[i] -> nodes[j]`` divided by
    the out-degree of node ``i``; ``a_in[i, j]`` is the weight of edge
    ``nodes[j] -> nodes[i]`` divided by the in-degree of node ``i``.
    ``alias[t]`` is the node position of ``prefix[t]``.
    """

    nodes: np.ndarray
    a_in: np.ndarray
    a_out: np.ndarray
    alias: np.ndarray

    @property
    def n(self):
        return len(self.nodes)

    @property
    def edge_count(self):
        return int(np.count_nonzero(self.a_out))

    def to_dict(self):
        return {
            "nodes": self.nodes.tolist(),
            "alias": self.alias.tolist(),
            "a_in": self.a_in.tolist(),
            "a_out": self.a_out.tolist(),
        }


def _row_normalise(weights):
    deg = weights.sum(axis=1, keepdims=True)
    return np.divide(weights, deg, out=np.zeros_like(weights), where=deg > 0)


def build_graph(prefix, weighted_edges=False):
    """Build the session graph of an item-index prefix.

    Consecutive clicks ``prefix[t] -> prefix[t+1]`` become edges.  By default
    a transition repeated within the prefix counts once; with
    ``weighted_edges`` the raw transition counts are normalised instead.
    Immediate repeats yield self-loops.
    """
    prefix = [int(v) for v in prefix]
    if not prefix:
        raise ContractError("cannot build a graph from an empty prefix")
    if min(prefix) <= 0:
        raise ContractError("prefix contains the padding index 0")

    position = {}
    for item in prefix:
        position.setdefault(item, len(position))
    n = len(position)
    alias = np.fromiter((position[v] for v in prefix), dtype=np.int64, count=len(prefix))

    counts = np.zeros((n, n), dtype=np.float64)
    np.add.at(counts, (alias[:-1], alias[1:]), 1.0)
    if not weighted_edges:
        counts = (counts > 0).astype(np.float64)

    return SessionGraph(
        nodes=np.fromiter(position, dtype=np.int64, count=n),
        a_in=_row_normalise(counts.T),
        a_out=_row_normalise(counts),
        alias=alias,
    )

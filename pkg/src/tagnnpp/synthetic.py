"""Synthetic click corpus drawn from a handful of fixed item cycles.

Items ``1..n_items`` are shuffled and split into ``n_patterns`` disjoint
cycles.  Each session picks a cycle, a start position and a length, then
walks the cycle, so the next click is a deterministic function of the
current one.  A model that fits the data should reach HR@1 close to 1.
"""

from __future__ import annotations

import numpy as np

from .autograd import Rng
from .data import Corpus, Session, Vocabulary


def markov_patterns(n_items=30, n_patterns=5, seed=0):
    perm = Rng(seed, (7,)).permutation(n_items) + 1
    return [tuple(int(i) for i in part) for part in np.array_split(perm, n_patterns)]


def _walk(pattern, start, length):
    return tuple(pattern[(start + k) % len(pattern)] for k in range(length))


def markov_corpus(n_sessions=200, n_items=30, n_patterns=5, min_len=3, max_len=10,
                  n_test_sessions=0, seed=0):
    """Build an encoded :class:`Corpus` of pattern walks.

    Item ``k`` has raw id ``str(k)`` so encoded and raw indices coincide.
    Test sessions, if requested, end one day after the last training session.
    """
    patterns = markov_patterns(n_items, n_patterns, seed)
    rng = Rng(seed, (8,))

    def draw(count, t0, tag):
        out = []
        for i in range(count):
            pat = patterns[int(rng.integers(len(patterns)))]
            start = int(rng.integers(len(pat)))
            length = int(rng.integers(min_len, max_len + 1))
            out.append(Session(f"{tag}{i}", _walk(pat, start, length), t0 + 60_000 * i))
        return out

    train = draw(n_sessions, 1_600_000_000_000, "s")
    test = draw(n_test_sessions, 1_600_000_000_000 + 86_400_000 * 2, "t")
    vocab = Vocabulary(str(k) for k in range(1, n_items + 1))
    return Corpus(vocab, train, test)

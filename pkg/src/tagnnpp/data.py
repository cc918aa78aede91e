"""Click-log ingestion: parsing, sessionising, filtering, splitting, batching.

The processed corpus is stored as ``<name>.sessions.bin`` with a JSON
sidecar ``<name>.stats.json``.  Binary layout (all integers little-endian)::

    b"SBR1"                       magic
    u32  version (=1)
    u32  M, then M x (u32 nbytes, utf-8 raw item id)   -> indices 1..M
    u32  n_train, then per session:
         u32 nbytes, utf-8 session id; i64 end_time_ms; u32 length; u32[length] items
    u32  n_test, same session records
"""

from __future__ import annotations

import csv
import datetime as dt
import functools
import io
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graph import build_graph

log = logging.getLogger(__name__)

MAGIC = b"SBR1"
FORMAT_VERSION = 1
DAY_MS = 86_400_000

# days of log held out as test data, per dataset
TEST_DAYS = {"yoochoose": 1, "diginetica": 7}
FORMATS = ("yoochoose", "diginetica")


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    timestamp: int  # epoch ms
    item_id: str
    order: int = 0  # secondary sort key (Diginetica "timeframe")


@dataclass(frozen=True)
class Session:
    id: str
    items: tuple
    end_time: int

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class LabeledExample:
    prefix: tuple
    label: int


class Vocabulary:
    """Bijection between raw item ids and indices ``1..M`` (0 is padding)."""

    def __init__(self, raw_ids=()):
        self._raw = [None]
        self._index = {}
        for raw in raw_ids:
            self.add(raw)

    def add(self, raw):
        if raw not in self._index:
            self._index[raw] = len(self._raw)
            self._raw.append(raw)
        return self._index[raw]

    def encode(self, raw):
        return self._index[raw]

    def decode(self, index):
        if index <= 0:
            raise KeyError(index)
        return self._raw[index]

    def __contains__(self, raw):
        return raw in self._index

    def __len__(self):
        return len(self._raw) - 1

    @property
    def raw_ids(self):
        return self._raw[1:]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._raw == other._raw


# ------------------------------------------------------------------ parsing


def _iso_to_ms(text):
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = dt.datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=dt.timezone.utc)
    return round(stamp.timestamp() * 1000)


def _date_to_ms(text):
    day = dt.date.fromisoformat(text.strip())
    return int(dt.datetime(day.year, day.month, day.day, tzinfo=dt.timezone.utc).timestamp()) * 1000


def _parse_yoochoose(row):
    session_id, stamp, item = row[0], row[1], row[2]
    if not item:
        raise ValueError("empty item id")
    return RawEvent(session_id, _iso_to_ms(stamp), item)


def _parse_diginetica(row):
    session_id, item, timeframe, eventdate = row[0], row[2], row[3], row[4]
    if not item:
        raise ValueError("empty item id")
    return RawEvent(session_id, _date_to_ms(eventdate), item, int(timeframe))


def parse_events(path, fmt):
    """Read a raw click log.

    Returns ``(events, skipped)`` where ``skipped`` counts malformed rows.
    Yoochoose rows are ``session_id,timestamp,item_id,category`` with ISO-8601
    timestamps and no header.  Diginetica is semicolon separated with header
    ``sessionId;userId;itemId;timeframe;eventdate``.
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    delimiter, parse, width = {
        "yoochoose": (",", _parse_yoochoose, 3),
        "diginetica": (";", _parse_diginetica, 5),
    }[fmt]
    events, skipped = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader, 1):
            if fmt == "diginetica" and lineno == 1 and row and row[0] == "sessionId":
                continue
            if not row:
                continue
            try:
                if len(row) < width:
                    raise ValueError(f"expected at least {width} fields")
                events.append(parse(row))
            except ValueError as exc:
                skipped += 1
                log.warning("%s:%d: skipping malformed row (%s)", path, lineno, exc)
    if skipped:
        log.warning("%s: skipped %d malformed rows", path, skipped)
    return events, skipped


# ------------------------------------------------------------- sessionising


def sessionize(events):
    """Group events into sessions ordered by (timestamp, order), stable on ties."""
    grouped = {}
    for pos, ev in enumerate(events):
        grouped.setdefault(ev.session_id, []).append((ev.timestamp, ev.order, pos, ev.item_id))
    sessions = []
    for sid, rows in grouped.items():
        rows.sort()
        sessions.append(Session(sid, tuple(r[3] for r in rows), max(r[0] for r in rows)))
    return sessions


def filter_sessions(sessions, min_item_count=5, min_length=2):
    """Drop rare items and short sessions, repeating until nothing changes."""
    while True:
        counts = Counter(item for s in sessions for item in s.items)
        kept, changed = [], False
        for s in sessions:
            items = tuple(i for i in s.items if counts[i] >= min_item_count)
            if len(items) < min_length:
                changed = True
                continue
            if len(items) != len(s.items):
                changed = True
            kept.append(Session(s.id, items, s.end_time) if len(items) != len(s.items) else s)
        sessions = kept
        if not changed:
            return sessions


def sessionize_and_filter(events, min_item_count=5, min_length=2):
    return filter_sessions(sessionize(events), min_item_count, min_length)


def split_by_time(sessions, dataset, test_days=None, fraction=None):
    """Hold out sessions ending in the final ``test_days`` of the log.

    The window is measured back from the latest session end time.  If
    ``fraction`` is given, only that most recent share of the training
    sessions (by end time) is kept.
    """
    if dataset not in TEST_DAYS:
        raise ConfigError(f"unknown dataset {dataset!r}")
    days = TEST_DAYS[dataset] if test_days is None else test_days
    if not sessions:
        raise ConfigError("no sessions to split")
    cutoff = max(s.end_time for s in sessions) - days * DAY_MS
    train = [s for s in sessions if s.end_time <= cutoff]
    test = [s for s in sessions if s.end_time > cutoff]
    if fraction is not None:
        if not 0 < fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
        train = sorted(train, key=lambda s: s.end_time)
        keep = int(len(train) * fraction)
        train = train[len(train) - keep:] if keep else []
    if not train or not test:
        which = "train" if not train else "test"
        raise ConfigError(f"time split left the {which} set empty")
    return train, test


def build_vocabulary(train):
    vocab = Vocabulary()
    for s in train:
        for item in s.items:
            vocab.add(item)
    return vocab


def filter_test_items(test, vocab, min_length=2):
    """Remove items unseen in training; drop sessions that get too short."""
    out = []
    for s in test:
        items = tuple(i for i in s.items if i in vocab)
        if len(items) >= min_length:
            out.append(s if len(items) == len(s.items) else Session(s.id, items, s.end_time))
    return out


def encode_sessions(sessions, vocab):
    return [Session(s.id, tuple(vocab.encode(i) for i in s.items), s.end_time) for s in sessions]


def expand_prefixes(session):
    """One example per proper prefix: ``(items[:t], items[t])`` for t >= 1."""
    items = tuple(session.items if isinstance(session, Session) else session)
    return [LabeledExample(items[:t], items[t]) for t in range(1, len(items))]


def expand_all(sessions):
    return [ex for s in sessions for ex in expand_prefixes(s)]


# ------------------------------------------------------------------ corpus


@dataclass
class Corpus:
    """Encoded train/test sessions plus the vocabulary they index into."""

    vocab: Vocabulary
    train: list
    test: list = field(default_factory=list)

    @property
    def n_items(self):
        return len(self.vocab)

    def train_examples(self):
        return expand_all(self.train)

    def test_examples(self):
        return expand_all(self.test)

    def stats(self):
        clicks = sum(len(s) for s in self.train) + sum(len(s) for s in self.test)
        sessions = len(self.train) + len(self.test)
        return {
            "clicks": clicks,
            "sessions": sessions,
            "train_sessions": len(self.train),
            "test_sessions": len(self.test),
            "train_examples": sum(len(s) - 1 for s in self.train),
            "test_examples": sum(len(s) - 1 for s in self.test),
            "items": self.n_items,
            "avg_length": clicks / sessions if sessions else 0.0,
        }

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        _write_strings(buf, [str(r) for r in self.vocab.raw_ids])
        for part in (self.train, self.test):
            buf.write(struct.pack("<I", len(part)))
            for s in part:
                _write_strings(buf, [s.id], counted=False)
                buf.write(struct.pack("<qI", s.end_time, len(s.items)))
                buf.write(np.asarray(s.items, dtype="<u4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob):
        view = memoryview(blob)
        if bytes(view[:4]) != MAGIC:
            raise ValueError("not a .sessions.bin file (bad magic)")
        (version,) = struct.unpack_from("<I", view, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported sessions.bin version {version}")
        pos = 8
        raw_ids, pos = _read_strings(view, pos)
        vocab = Vocabulary(raw_ids)
        parts = []
        for _ in range(2):
            (count,) = struct.unpack_from("<I", view, pos)
            pos += 4
            part = []
            for _ in range(count):
                (sid,), pos = _read_strings(view, pos, count=1)
                end_time, length = struct.unpack_from("<qI", view, pos)
                pos += 12
                items = np.frombuffer(view, dtype="<u4", count=length, offset=pos)
                pos += 4 * length
                part.append(Session(sid, tuple(int(i) for i in items), end_time))
            parts.append(part)
        return cls(vocab, parts[0], parts[1])

    def save(self, out_dir, name):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        bin_path = out_dir / f"{name}.sessions.bin"
        bin_path.write_bytes(self.to_bytes())
        stats_path = out_dir / f"{name}.stats.json"
        stats_path.write_text(json.dumps(self.stats(), indent=2, sort_keys=True) + "\n")
        return bin_path, stats_path

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def _write_strings(buf, strings, counted=True):
    if counted:
        buf.write(struct.pack("<I", len(strings)))
    for s in strings:
        raw = s.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)


def _read_strings(view, pos, count=None):
    if count is None:
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", view, pos)
        pos += 4
        out.append(bytes(view[pos:pos + n]).decode("utf-8"))
        pos += n
    return out, pos


def parse_fraction(text):
    """Parse ``"1/64"`` or ``"0.015625"`` into a float."""
    if text is None:
        return None
    if isinstance(text, (int, float)):
        return float(text)
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def preprocess(path, dataset, fraction=None, test_days=None, min_item_count=5, count_scope="full"):
    """Run the whole raw-log -> :class:`Corpus` pipeline.

    ``count_scope="train"`` counts item occurrences on the training split
    only instead of the full log.
    """
    fraction = parse_fraction(fraction)
    if fraction is not None and dataset != "yoochoose":
        raise ConfigError("--fraction only applies to the yoochoose dataset")
    if count_scope not in ("full", "train"):
        raise ConfigError(f"count_scope must be 'full' or 'train', got {count_scope!r}")
    events, _ = parse_events(path, dataset)
    if count_scope == "full":
        sessions = sessionize_and_filter(events, min_item_count)
        train, test = split_by_time(sessions, dataset, test_days, fraction)
    else:
        sessions = filter_sessions(sessionize(events), min_item_count=1)
        train, test = split_by_time(sessions, dataset, test_days, fraction)
        train = filter_sessions(train, min_item_count)
    vocab = build_vocabulary(train)
    test = filter_test_items(test, vocab)
    return Corpus(vocab, encode_sessions(train, vocab), encode_sessions(test, vocab))


# ----------------------------------------------------------------- batching


@dataclass
class Batch:
    """Right-padded prefixes with their session graphs stacked to common size.

    ``mask`` is True exactly at padding slots.  Graph arrays are padded to the
    largest node count ``N``; padded nodes have id 0 and no edges.
    """

    items: np.ndarray  # [B, L]
    lengths: np.ndarray  # [B]
    mask: np.ndarray  # [B, L] bool
    labels: np.ndarray  # [B]
    graphs: list
    node_ids: np.ndarray  # [B, N]
    a_in: np.ndarray  # [B, N, N]
    a_out: np.ndarray  # [B, N, N]
    alias: np.ndarray  # [B, L]
    index: np.ndarray  # [B] position of each row in the source example list

    def __len__(self):
        return len(self.labels)


@functools.lru_cache(maxsize=1 << 16)
def _graph_for(prefix, weighted_edges):
    return build_graph(prefix, weighted_edges)


def collate(examples, index=None, weighted_edges=False):
    lengths = np.array([len(ex.prefix) for ex in examples], dtype=np.int64)
    graphs = [_graph_for(tuple(ex.prefix), weighted_edges) for ex in examples]
    B, L = len(examples), int(lengths.max())
    N = max(g.n for g in graphs)
    items = np.zeros((B, L), dtype=np.int64)
    alias = np.zeros((B, L), dtype=np.int64)
    node_ids = np.zeros((B, N), dtype=np.int64)
    a_in = np.zeros((B, N, N))
    a_out = np.zeros((B, N, N))
    for b, (ex, g) in enumerate(zip(examples, graphs)):
        n, t = g.n, len(ex.prefix)
        items[b, :t] = ex.prefix
        alias[b, :t] = g.alias
        node_ids[b, :n] = g.nodes
        a_in[b, :n, :n] = g.a_in
        a_out[b, :n, :n] = g.a_out
    return Batch(
        items=items,
        lengths=lengths,
        mask=items == 0,
        labels=np.array([ex.label for ex in examples], dtype=np.int64),
        graphs=graphs,
        node_ids=node_ids,
        a_in=a_in,
        a_out=a_out,
        alias=alias,
        index=np.arange(B) if index is None else np.asarray(index),
    )


def make_batches(examples, batch_size, rng=None, weighted_edges=False):
    """Yield batches; shuffled with ``rng`` when given, else in input order."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield collate([examples[i] for i in idx], idx, weighted_edges)


def n_batches(n_examples, batch_size):
    return math.ceil(n_examples / batch_size)

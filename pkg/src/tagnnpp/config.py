"""Run configuration: flat ``key = value`` files, presets, overrides, hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import PRESETS, ModelConfig
from .train import TrainConfig

RUN_KEYS = {
    "dataset": "yoochoose",
    "data": None,
    "out": "runs",
    "weighted_edges": False,
    "eval_n": 20,
}
MODEL_KEYS = [f.name for f in fields(ModelConfig) if f.name != "n_items"]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]

# (label, toggle switched off) for each ablation row
ABLATIONS = [
    ("TAGNN++", None),
    ("- AGC", "agc_enabled"),
    ("- GNN", "use_gnn"),
    ("- PE", "use_pe"),
    ("- Transformer", "use_transformer"),
]


def parse_config_text(text):
    """Parse ``key = value`` lines; values are JSON, bare words are strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


def load_config_file(path):
    return parse_config_text(Path(path).read_text())


def defaults_for(dataset):
    out = dict(RUN_KEYS, dataset=dataset)
    model = ModelConfig(n_items=1)
    out.update({k: getattr(model, k) for k in MODEL_KEYS})
    out.update(PRESETS.get(dataset, {}))
    train = TrainConfig()
    out.update({k: getattr(train, k) for k in TRAIN_KEYS})
    return out


def resolve(file_values=None, overrides=None):
    """Merge defaults <- file <- overrides and validate every key.

    Raises :class:`ConfigError` listing all problems at once.
    """
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    resolved = defaults_for(merged.get("dataset", RUN_KEYS["dataset"]))
    problems = [f"{k}: unknown key" for k in merged if k not in resolved]
    resolved.update({k: v for k, v in merged.items() if k in resolved})
    problems += model_config(resolved, n_items=1).problems()
    problems += train_config(resolved).problems()
    if not isinstance(resolved["eval_n"], int) or resolved["eval_n"] < 1:
        problems.append(f"eval_n: must be a positive integer, got {resolved['eval_n']!r}")
    if not isinstance(resolved["weighted_edges"], bool):
        problems.append("weighted_edges: must be true or false")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return resolved


def model_config(resolved, n_items):
    return ModelConfig(n_items=n_items, **{k: resolved[k] for k in MODEL_KEYS})


def train_config(resolved):
    return TrainConfig(**{k: resolved[k] for k in TRAIN_KEYS})


def config_hash(resolved, data_hash=""):
    blob = json.dumps(resolved, sort_keys=True).encode() + data_hash.encode()
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ablation_configs(resolved):
    """The full configuration and one copy per removed component."""
    rows = []
    for label, toggle in ABLATIONS:
        cfg = dict(resolved)
        if toggle is not None:
            cfg[toggle] = False
        rows.append((label, cfg))
    return rows

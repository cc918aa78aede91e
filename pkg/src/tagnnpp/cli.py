"""Command-line entry point: preprocess, synth, train, evaluate, ablate, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from .data import Corpus, make_batches, preprocess
from .errors import ConfigError
from .gradcheck import run_all
from .metrics import emit_plot_data, evaluate
from .model import TAGNNPlusPlus, load_checkpoint
from .synthetic import markov_corpus
from .train import fit

log = logging.getLogger("tagnnpp")

DTYPES = {"float32": np.float32, "float64": np.float64}


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


def _print_stats(dataset, stats, out=None):
    out = out or sys.stdout
    header = ["Dataset", "Clicks", "Train Sessions", "Test Sessions", "Total Items", "Avg. Length"]
    row = [
        dataset,
        str(stats["clicks"]),
        str(stats["train_examples"]),
        str(stats["test_examples"]),
        str(stats["items"]),
        f"{stats['avg_length']:.2f}",
    ]
    widths = [max(len(a), len(b)) for a, b in zip(header, row)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)), file=out)
    print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=out)


# ------------------------------------------------------------- subcommands


def cmd_preprocess(args):
    if not Path(args.input).is_file():
        raise UsageError(f"input file not found: {args.input}")
    corpus = preprocess(
        args.input,
        args.dataset,
        fraction=args.fraction,
        test_days=args.test_days,
        min_item_count=args.min_item_count,
        count_scope=args.count_scope,
    )
    bin_path, stats_path = corpus.save(args.out, args.name or args.dataset)
    _print_stats(args.dataset, corpus.stats())
    print(f"wrote {bin_path} and {stats_path}")
    return 0


def cmd_synth(args):
    corpus = markov_corpus(
        n_sessions=args.sessions,
        n_items=args.items,
        n_patterns=args.patterns,
        n_test_sessions=args.test_sessions,
        seed=args.seed,
    )
    bin_path, _ = corpus.save(args.out, args.name)
    _print_stats("synthetic", corpus.stats())
    print(f"wrote {bin_path}")
    return 0


def _train_overrides(args):
    over = {"seed": args.seed, "out": args.out, "data": args.data, "epochs": args.max_epochs}
    for flag, key in (("no_agc", "agc_enabled"), ("no_gnn", "use_gnn"),
                      ("no_pe", "use_pe"), ("no_transformer", "use_transformer")):
        if getattr(args, flag, False):
            over[key] = False
    return over


def _resolve_from_args(args):
    file_values = rc.load_config_file(args.config) if args.config else {}
    resolved = rc.resolve(file_values, _train_overrides(args))
    if not resolved["data"]:
        raise ConfigError("invalid configuration:\n  data: path to a .sessions.bin file is required")
    if not Path(resolved["data"]).is_file():
        raise UsageError(f"data file not found: {resolved['data']}")
    return resolved


def run_training(resolved, run_dir, dump_graphs=False):
    """Train one configuration into ``run_dir``; returns ``(model, corpus)``."""
    corpus = Corpus.load(resolved["data"])
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=False)
    record = dict(resolved, data_sha256=rc.file_sha256(resolved["data"]), n_items=corpus.n_items)
    (run_dir / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    mcfg = rc.model_config(resolved, corpus.n_items)
    tcfg = rc.train_config(resolved)
    model = TAGNNPlusPlus.initialize(mcfg, seed=tcfg.seed, dtype=DTYPES[tcfg.dtype])
    examples = corpus.train_examples()
    if dump_graphs:
        batch = next(make_batches(examples, tcfg.batch_size, weighted_edges=resolved["weighted_edges"]))
        dump = [dict(g.to_dict(), prefix=batch.items[b, : batch.lengths[b]].tolist())
                for b, g in enumerate(batch.graphs)]
        (run_dir / "graphs.json").write_text(json.dumps(dump, indent=1) + "\n")
    fit(model, examples, tcfg, run_dir=run_dir, eval_n=resolved["eval_n"])
    return model, corpus


def _run_dir(resolved, prefix):
    digest = rc.config_hash(resolved, rc.file_sha256(resolved["data"]))
    path = Path(resolved["out"]) / f"{prefix}-{digest[:12]}"
    if path.exists():
        raise UsageError(f"run directory {path} already exists; pick a fresh --out")
    return path


def cmd_train(args):
    resolved = _resolve_from_args(args)
    run_dir = _run_dir(resolved, "run")
    run_training(resolved, run_dir, dump_graphs=args.dump_graphs)
    print(run_dir)
    return 0


def _eval_examples(corpus, split):
    return corpus.test_examples() if split == "test" else corpus.train_examples()


def cmd_evaluate(args):
    for path in (args.checkpoint, args.data):
        if not Path(path).is_file():
            raise UsageError(f"file not found: {path}")
    model, _ = load_checkpoint(args.checkpoint)
    corpus = Corpus.load(args.data)
    examples = _eval_examples(corpus, args.split)
    if not examples:
        raise UsageError(f"no {args.split} examples in {args.data}")
    report = evaluate(model, examples, n=args.n, n_items=corpus.n_items, dataset=Path(args.data).name.split(".")[0])
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "scatter.csv").write_text(emit_plot_data([report]))
    print(f"HR@{report.n} = {report.hr:.2f}  MRR@{report.n} = {report.mrr:.2f}  ({report.example_count} examples)")
    return 0


def cmd_ablate(args):
    resolved = _resolve_from_args(args)
    root = _run_dir(resolved, "ablation")
    root.mkdir(parents=True)
    reports = []
    for i, (label, cfg) in enumerate(rc.ablation_configs(resolved)):
        model, corpus = run_training(cfg, root / f"{i}-{label.strip('- ').replace('+', 'p').lower()}")
        examples = corpus.test_examples() or corpus.train_examples()
        report = evaluate(model, examples, n=resolved["eval_n"], dataset=resolved["dataset"])
        report.model = label
        (root / f"{i}-report.json").write_text(report.to_json())
        reports.append(report)
        print(f"{label:15s} HR@{report.n}={report.hr:6.2f}  MRR@{report.n}={report.mrr:6.2f}", flush=True)
    (root / "ablation.csv").write_text(emit_plot_data(reports))
    print(root)
    return 0


def cmd_gradcheck(args):
    results = run_all(seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:32s} rel_err={r.error:.3e}  tol={r.tol:g}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ----------------------------------------------------------------- parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="tagnnpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw click log -> .sessions.bin + .stats.json")
    p.add_argument("--dataset", choices=["yoochoose", "diginetica"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--fraction", help="keep this most recent share of training sessions, e.g. 1/64")
    p.add_argument("--test-days", type=int)
    p.add_argument("--min-item-count", type=int, default=5)
    p.add_argument("--count-scope", choices=["full", "train"], default="full")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="write the synthetic Markov-pattern corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--sessions", type=int, default=200)
    p.add_argument("--test-sessions", type=int, default=50)
    p.add_argument("--items", type=int, default=30)
    p.add_argument("--patterns", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--max-epochs", type=int)
        if name == "train":
            p.add_argument("--no-agc", action="store_true")
            p.add_argument("--no-gnn", action="store_true")
            p.add_argument("--no-pe", action="store_true")
            p.add_argument("--no-transformer", action="store_true")
            p.add_argument("--dump-graphs", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    threads = os.environ.get("SBR_THREADS")
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

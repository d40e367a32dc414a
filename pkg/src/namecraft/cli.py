"""Command-line interface: train, predict, explain, bench, stats.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
``NAMECRAFT_THREADS`` caps the worker threads used by predict and bench.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import chain, islice
from pathlib import Path

import numpy as np

from . import lrp, n2c
from .cnn import CnnConfig
from .corpus import canonical_row, iter_csv_rows, load_dataset
from .errors import ModelMismatchError, NamecraftError
from .evaluation import char_frequency_csv, char_frequency_profile, evaluate
from .modelfile import load_model, save_model
from .pipeline import STAGE2_C, CnnPipeline, train_pipeline

log = logging.getLogger("namecraft")

MODEL_CHOICES = ("lr", "svm", "cnn", "n2c", "two-stage")
CHUNK = 4096


def _threads() -> int:
    raw = os.environ.get("NAMECRAFT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise NamecraftError(f"NAMECRAFT_THREADS must be an integer, got {raw!r}") from None


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --- train -----------------------------------------------------------------------


def _cnn_config(args) -> CnnConfig:
    base = CnnConfig.concat_defaults() if args.mode == "concat" else CnnConfig()
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("embed_dim", "embed_dim"),
                      ("dense_units", "dense_units"), ("min_lr", "min_lr"), ("patience", "patience"),
                      ("learning_rate", "learning_rate"), ("filters", "filters"),
                      ("kernel_sizes", "kernel_sizes"), ("activation", "conv_activation")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if "filters" in overrides and "kernel_sizes" not in overrides:
        overrides["kernel_sizes"] = tuple(range(1, len(overrides["filters"]) + 1))
    return CnnConfig(**{**base.to_dict(), **overrides})


def cmd_train(args) -> int:
    kind = args.model.replace("-", "_")
    mode = args.mode
    if kind == "two_stage" and mode != "single":
        raise NamecraftError("the household model reads person and relative names separately; use --mode single")
    ds = load_dataset(args.data, mode)
    cnn_config = _cnn_config(args) if kind == "cnn" or args.stage1 == "cnn" else None
    dtype = np.float64 if args.float64 else np.float32
    result = train_pipeline(
        kind, mode, ds, args.seed, C=args.C, max_n=args.max_n, cnn_config=cnn_config, dtype=dtype,
        majority_tiebreak=args.tiebreak, stage1=args.stage1, stage2_C=args.stage2_C, rfe=not args.no_rfe,
    )
    pipe = result.pipeline
    training = {
        "data": Path(args.data).name,
        "n_records": len(ds),
        "n_train": len(result.train),
        "n_val": len(result.val),
        "n_test": len(result.test),
    }
    if kind in ("lr", "svm"):
        training.update(C=pipe.model.reg_strength, max_n=pipe.space.max_n)
    if cnn_config is not None:
        training["cnn"] = pipe.model.config.to_dict() if kind == "cnn" else pipe.stage1.model.config.to_dict()
    if result.history is not None:
        training["history_csv"] = result.history.to_csv()
    if kind == "two_stage":
        training.update(stage1=args.stage1, stage2_C=args.stage2_C, rfe=not args.no_rfe)
    save_model(args.out, pipe, args.seed, training)
    for split_name, split in (("validation", result.val), ("test", result.test)):
        if len(split) == 0:
            continue
        preds = pipe.predict(split.names, [r.relative_name for r in split.records])
        report = evaluate(preds, split.labels, split.class_names, B=args.bootstrap, seed=args.seed)
        print(f"# {split_name} ({len(split)} records)")
        print(report.to_text(), end="")
    print(f"model written to {args.out}")
    return 0


# --- predict ---------------------------------------------------------------------


def _chunks(iterable, size):
    it = iter(iterable)
    while True:
        block = list(islice(it, size))
        if not block:
            return
        yield block


def _predict_block(pipe, mode, cfg, block, with_proba):
    names, relatives = [], []
    for rownum, row in block:
        doc, rel = canonical_row(row, mode, cfg, rownum)
        names.append(doc)
        relatives.append(rel)
    preds = pipe.predict(names, relatives)
    proba = pipe.proba(names, relatives) if with_proba else None
    return block, preds, proba


def cmd_predict(args) -> int:
    pipe, cfg, _ = load_model(args.model_file)
    if args.proba and pipe.kind == "n2c":
        raise NamecraftError("the dictionary model has no probability output")
    classes = list(pipe.classes)
    show_relative = pipe.mode == "concat" or pipe.kind == "two_stage"
    rows = iter_csv_rows(args.data)
    first = next(rows, None)  # validates the header before anything is written
    rows = chain([first], rows) if first is not None else iter(())
    out = csv.writer(sys.stdout, lineterminator="\n")
    header = ["name"] + (["relative_name"] if show_relative else []) + ["predicted_class"]
    if args.proba:
        header += [f"p_{c}" for c in classes]
    out.writerow(header)
    tally = {"UNCLASSIFIED": 0, "AMBIGUOUS": 0}
    total = 0
    workers = _threads()
    blocks = _chunks(rows, CHUNK)

    def emit(result):
        nonlocal total
        block, preds, proba = result
        for i, ((_, row), p) in enumerate(zip(block, preds)):
            label = n2c.OUTCOME_NAMES.get(int(p)) or classes[int(p)]
            if label in tally:
                tally[label] += 1
            rec = [row["name"]] + ([row["relative_name"]] if show_relative else []) + [label]
            if proba is not None:
                rec += [repr(float(v)) for v in proba[i]]
            out.writerow(rec)
        total += len(block)

    if workers == 1:
        for block in blocks:
            emit(_predict_block(pipe, pipe.mode, cfg, block, args.proba))
    else:
        # bounded look-ahead keeps memory constant; map preserves input order
        with ThreadPoolExecutor(workers) as pool:
            pending = []
            for block in blocks:
                pending.append(pool.submit(_predict_block, pipe, pipe.mode, cfg, block, args.proba))
                if len(pending) >= 2 * workers:
                    emit(pending.pop(0).result())
            for fut in pending:
                emit(fut.result())
    sys.stdout.flush()
    if pipe.kind == "n2c":
        print(f"# {tally['UNCLASSIFIED']} UNCLASSIFIED, {tally['AMBIGUOUS']} AMBIGUOUS of {total} rows; "
              f"coverage {(total - tally['UNCLASSIFIED'] - tally['AMBIGUOUS']) / max(total, 1):.4f}",
              file=sys.stderr)
    return 0


# --- explain ---------------------------------------------------------------------


def cmd_explain(args) -> int:
    pipe, cfg, _ = load_model(args.model_file)
    if not isinstance(pipe, CnnPipeline):
        raise ModelMismatchError("LRP requires the neural model")
    model = pipe.model
    ds = load_dataset(args.data, pipe.mode, cfg, classes=list(pipe.classes))
    if args.target_class not in model.classes:
        raise ModelMismatchError(f"unknown class {args.target_class!r}; model has {list(model.classes)}")
    target = model.classes.index(args.target_class)
    names = ds.names
    if all(r.label is not None for r in ds.records) and not args.all_names:
        keep = lrp.correctly_classified(model, names, ds.labels)
        keep = [i for i in keep if ds.records[i].label == target]
        names = [names[i] for i in keep]
    out = Path(args.out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    maps = lrp.relevance_maps(model, names, target)
    rels = [lrp.char_relevance(m) for m in maps]
    shown = [(m.name, r) for m, r in zip(maps, rels)][: args.max_heatmaps]
    for i, (name, r) in enumerate(shown, start=1):
        page = lrp.heatmap_page([(name, r)], title=name)
        (out / "heatmaps" / f"{i:05d}.html").write_text(page, encoding="utf-8")
    (out / "heatmaps.html").write_text(lrp.heatmap_page(shown, title=f"relevance for {args.target_class}"),
                                       encoding="utf-8")
    clean = [m.name for m in maps]
    for n in args.ngrams:
        report = lrp.ngram_from_chars(clean, rels, n, args.min_count)
        (out / f"ngrams_{n}.csv").write_text(report.to_csv(), encoding="utf-8")
    profile = lrp.profile_from_chars(clean, rels, args.bins, cfg)
    (out / "positional_profile.csv").write_text(profile.to_csv(), encoding="utf-8")
    print(f"explained {len(maps)} names for class {args.target_class}; reports in {out}")
    return 0


# --- bench -----------------------------------------------------------------------


def cmd_bench(args) -> int:
    pipe, cfg, _ = load_model(args.model_file)
    rows = [canonical_row(row, pipe.mode, cfg, i) for i, row in iter_csv_rows(args.data)]
    names = [r[0] for r in rows]
    relatives = [r[1] for r in rows]
    if not names:
        raise NamecraftError("no rows to benchmark")
    workers = _threads()

    def run():
        if workers == 1:
            pipe.predict(names, relatives)
            return
        step = -(-len(names) // workers)
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda s: pipe.predict(names[s:s + step], relatives[s:s + step]),
                          range(0, len(names), step)))

    run()  # warm-up
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    sample = min(len(names), args.latency_sample)
    lat = []
    for i in range(sample):
        t0 = time.perf_counter()
        pipe.predict(names[i:i + 1], relatives[i:i + 1])
        lat.append(time.perf_counter() - t0)
    med = statistics.median(times)
    report = {
        "model_kind": pipe.kind,
        "n_names": len(names),
        "threads": workers,
        "repeats": [len(names) / t for t in times],
        "wall_seconds": times,
        "names_per_second": len(names) / med,
        "latency_ms": {f"p{q}": float(np.percentile(lat, q) * 1e3) for q in (50, 90, 99)},
    }
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"model: {pipe.kind}  names: {len(names)}  threads: {workers}")
        for i, (t, r) in enumerate(zip(times, report["repeats"]), start=1):
            print(f"  repeat {i}: {t:.4f} s  {r:,.0f} names/s")
        print(f"median throughput: {report['names_per_second']:,.0f} names/s")
        lat_ms = report["latency_ms"]
        print(f"single-name latency (ms): p50 {lat_ms['p50']:.3f}  p90 {lat_ms['p90']:.3f}  p99 {lat_ms['p99']:.3f}")
    return 0


# --- stats -----------------------------------------------------------------------


def cmd_stats(args) -> int:
    ds = load_dataset(args.data, "single")
    sys.stdout.write(char_frequency_csv(char_frequency_profile(ds)))
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="namecraft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a model file")
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p.add_argument("--mode", choices=("single", "concat"), default="single")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--C", type=float, help="inverse L2 strength (default: tuned per model and mode)")
    p.add_argument("--max-n", type=int, help="longest character n-gram (default: tuned per model and mode)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--dense-units", type=int)
    p.add_argument("--filters", type=_int_tuple, help="filters per kernel width, e.g. 50,300,305")
    p.add_argument("--kernel-sizes", type=_int_tuple)
    p.add_argument("--activation", choices=("tanh", "elu", "relu", "sigmoid", "linear"))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--float64", action="store_true", help="train the CNN in 64-bit floats")
    p.add_argument("--tiebreak", action="store_true", help="n2c: map unclassified/ambiguous to the majority class")
    p.add_argument("--stage1", choices=("lr", "svm", "cnn"), default="lr", help="two-stage: first-stage model")
    p.add_argument("--stage2-C", type=float, default=STAGE2_C)
    p.add_argument("--no-rfe", action="store_true", help="two-stage: keep the full feature pool")
    p.add_argument("--bootstrap", type=int, default=1000, help="bootstrap resamples for standard errors")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions as CSV to standard output")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--proba", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="relevance heatmaps and n-gram / positional reports")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target-class", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ngrams", type=_int_tuple, default=(1, 2, 3))
    p.add_argument("--min-count", type=int, default=25)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--max-heatmaps", type=int, default=100)
    p.add_argument("--all-names", action="store_true",
                   help="explain every row instead of correctly classified rows of the target class")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("bench", help="measure prediction throughput")
    p.add_argument("--model-file", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--latency-sample", type=int, default=1000)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("stats", help="per-class letter frequency CSV")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "bins", 2) < 2 or getattr(args, "repeat", 1) < 1:
        parser.error("--bins must be >= 2 and --repeat >= 1")
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 1
    except (NamecraftError, OSError, ValueError) as exc:
        print(f"namecraft: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

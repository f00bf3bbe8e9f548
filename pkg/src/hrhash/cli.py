"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, FormatError, InvalidInputError, ProtocolError

log = logging.getLogger("hrhash")

OUTPUT_ROOT_ENV = "HRHASH_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _output_dir(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / cfg.output_dir if root else Path(cfg.output_dir)


def _load(args):
    from .config import load_config

    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "map_k", None) is not None:
        overrides.append(f"evaluation.map_k={args.map_k}")
    if getattr(args, "include_train_in_db", False):
        overrides.append("data.include_train_in_db=true")
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    from .experiment import run_training

    cfg = _load(args)
    out = _output_dir(args, cfg)
    run_training(cfg, out)
    print(f"wrote {cfg.train.runs} checkpoint(s) to {out}")
    return 0


def cmd_bench(args) -> int:
    from .evaluation import render_table, write_report
    from .experiment import run_benchmark

    cfg = _load(args)
    out = _output_dir(args, cfg)
    report = run_benchmark(cfg, out)
    write_report(report, out / "report")
    sys.stdout.write(render_table(report))
    return 0


def cmd_encode(args) -> int:
    from .data import load_split
    from .experiment import SUBSETS, encode_manifest, sidecar_meta, subset_ids
    from .model import read_checkpoint
    from .retrieval import save_db, write_sidecar

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest {args.manifest} not found")
    meta, _ = read_checkpoint(args.checkpoint)
    k = meta["head"]["code_length"]
    if args.code_length is not None and args.code_length != k:
        raise UsageError(f"--code-length {args.code_length} does not match the checkpoint's {k} bits")
    ids = None
    subset = args.subset
    if args.split:
        if subset not in SUBSETS:
            raise UsageError(f"--subset must be one of {SUBSETS}")
        split = load_split(args.split)
        if subset != "all":
            ids = subset_ids(split, subset, args.include_train_in_db)
    elif subset not in ("all", None):
        raise UsageError("--subset needs --split")
    db, meta = encode_manifest(args.checkpoint, args.manifest, ids)
    save_db(db, args.out)
    write_sidecar(args.out, sidecar_meta(meta, subset or "all"))
    print(f"encoded {db.n} samples ({db.k} bits) into {args.out}")
    return 0


def _load_pair(db_path, q_path):
    from .retrieval import load_db

    for p in (db_path, q_path):
        if not Path(p).is_file():
            raise UsageError(f"database file {p} not found")
    db, q = load_db(db_path), load_db(q_path)
    if db.k != q.k:
        raise UsageError(f"code length mismatch: database {db.k} bits, queries {q.k} bits")
    return db, q


def cmd_retrieve(args) -> int:
    from .retrieval import search

    db, q = _load_pair(args.db, args.queries)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    out = sys.stdout
    for i in range(q.n):
        res = search(db, q.codes[i], args.top_k)
        qid = int(q.ids[i])
        for rank, (did, dist) in enumerate(zip(res.ids.tolist(), res.distances.tolist()), 1):
            out.write(f"{qid}\t{rank}\t{did}\t{dist}\n")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import BenchmarkEntry, BenchmarkReport, evaluate, render_table, write_report
    from .retrieval import read_sidecar

    db, q = _load_pair(args.db, args.queries)
    if q.n == 0:
        raise UsageError("query database is empty")
    if args.map_k < 1:
        raise UsageError("--map-k must be >= 1")
    mdb, mq = read_sidecar(args.db), read_sidecar(args.queries)
    if mdb and mq and mdb.get("config_hash") != mq.get("config_hash"):
        raise UsageError(
            f"database and queries come from different configs ({mdb.get('config_hash')} vs {mq.get('config_hash')})"
        )
    meta = mq or mdb or {}
    score = evaluate(db, q, args.map_k, exclude_self=args.exclude_self)
    entry = BenchmarkEntry(
        dataset=args.dataset or meta.get("dataset") or "dataset",
        loss=args.loss or meta.get("loss") or "loss",
        backbone=f"W{meta['backbone_width']}" if "backbone_width" in meta else "W?",
        bits=db.k,
        run_maps=[score.map],
        run_seeds=[meta.get("seed", 0)],
        num_queries=score.num_queries,
        k=args.map_k,
        config_hash=meta.get("config_hash", ""),
    )
    report = BenchmarkReport([entry])
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        write_report(report, args.report)
    sys.stdout.write(render_table(report))
    print(f"mAP@{args.map_k} = {score.map:.6f} over {score.num_queries} queries "
          f"({score.zero_relevant} with no relevant item in the database)")
    return 0


def cmd_split(args) -> int:
    from .data import PROTOCOLS, build_split, read_manifest, save_split

    if not Path(args.manifest).is_file():
        raise UsageError(f"manifest {args.manifest} not found")
    if args.protocol in PROTOCOLS:
        protocol = PROTOCOLS[args.protocol]
    else:
        raise UsageError(f"unknown protocol {args.protocol!r}; choose from {sorted(PROTOCOLS)}")
    labels = [ls for _, ls in read_manifest(args.manifest)]
    split = build_split(protocol, labels, args.seed)
    save_split(split, args.out)
    print(
        f"{protocol.name}: train {len(split.train_ids)}, test {len(split.test_ids)}, "
        f"val {len(split.val_ids)}, database {len(split.database_ids)}"
    )
    return 0


def cmd_synth(args) -> int:
    from .data import generate_synthetic, write_synthetic

    samples = generate_synthetic(
        args.num_classes, args.per_class, args.image_size, args.noise, args.seed, args.multi_label
    )
    path = write_synthetic(args.out, samples, args.format)
    print(f"wrote {len(samples)} images and {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hrhash", description="Deep hashing with a multi-resolution backbone.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE")
        sp.add_argument("--include-train-in-db", action="store_true")

    sp = sub.add_parser("train", help="train every run of an experiment")
    config_args(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", help="train, encode and evaluate an experiment")
    config_args(sp)
    sp.add_argument("--map-k", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("encode", help="encode manifest images into an HHDB file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split")
    sp.add_argument("--subset", default=None)
    sp.add_argument("--include-train-in-db", action="store_true")
    sp.add_argument("--code-length", type=int)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("retrieve", help="rank database codes for every query")
    sp.add_argument("--db", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--top-k", type=int, default=10)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("evaluate", help="mAP@k of queries against a database")
    sp.add_argument("--db", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--map-k", type=int, default=1000)
    sp.add_argument("--report")
    sp.add_argument("--dataset")
    sp.add_argument("--loss")
    sp.add_argument("--exclude-self", action="store_true", help="skip the database entry with the query's id")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("split", help="build a benchmark split from a label manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("synth", help="write a synthetic image dataset and manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-classes", type=int, default=3)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--image-size", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--multi-label", action="store_true")
    sp.add_argument("--format", choices=("png", "npy"), default="png")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, ProtocolError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, InvalidInputError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

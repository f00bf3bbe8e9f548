"""Wiring of data, training, encoding and evaluation into reproducible runs."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence

import torch

from .config import ExperimentConfig
from .core import Sample, SplitSpec
from .data import build_split, generate_synthetic, load_samples, load_split, read_manifest, save_split
from .evaluation import BenchmarkEntry, BenchmarkReport, evaluate
from .model import HashingModel, load_model, save_model
from .retrieval import RetrievalDatabase
from .trainer import TrainResult, encode_dataset, train, write_log, write_timing

log = logging.getLogger(__name__)

SUBSETS = ("train", "test", "val", "database", "all")


def load_dataset(cfg: ExperimentConfig) -> list[Sample]:
    d = cfg.data
    if d.synthetic is not None:
        s = d.synthetic
        return generate_synthetic(s.num_classes, s.per_class, s.image_size, s.noise_level, s.seed, s.multi_label)
    return load_samples(d.manifest)


def resolve_split(cfg: ExperimentConfig, labels: Sequence) -> SplitSpec:
    if cfg.data.split_file:
        split = load_split(cfg.data.split_file)
    else:
        split = build_split(cfg.data.protocol, labels, cfg.data.split_seed)
    split.check_within(len(labels))
    return split


def subset_ids(split: SplitSpec, subset: str, include_train_in_db: bool = False, n: int | None = None) -> list[int]:
    if subset == "all":
        return list(range(n))
    if subset == "database":
        return list(split.database_with_train() if include_train_in_db else split.database_ids)
    return list(getattr(split, f"{subset}_ids"))


def checkpoint_meta(cfg: ExperimentConfig, num_classes: int) -> dict:
    return {
        "config_hash": cfg.config_hash,
        "dataset": cfg.data.name,
        "loss": cfg.train.loss.name,
        "num_classes": num_classes,
    }


def run_training(cfg: ExperimentConfig, out_dir, samples: Sequence[Sample] | None = None) -> list[TrainResult]:
    """Train every run; writes ``run{r}.hhckpt``, ``run{r}.log.jsonl`` and timing files."""
    torch.set_num_threads(1)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(cfg) if samples is None else samples
    split = resolve_split(cfg, [s.labels for s in samples])
    save_split(split, out / "split.json")
    with open(out / "config.json", "w") as f:
        json.dump({"config_hash": cfg.config_hash, "config": cfg.raw}, f, sort_keys=True, indent=2, default=str)
        f.write("\n")
    num_classes = 1 + max(c for s in samples for c in s.labels)
    results = []
    for r, seed in enumerate(cfg.train.run_seeds()):
        log.info("run %d/%d (seed %d)", r + 1, cfg.train.runs, seed)
        res = train(cfg.train, split, samples, seed=seed)
        save_model(out / f"run{r}.hhckpt", res.model, seed, cfg.train.resolved_preprocess, checkpoint_meta(cfg, num_classes))
        write_log(out / f"run{r}.log.jsonl", res.log, cfg.config_hash)
        write_timing(out / f"run{r}.timing.jsonl", res.wall_times)
        results.append(res)
    return results


def encode_to_database(model: HashingModel, samples: Sequence[Sample], preprocess) -> RetrievalDatabase:
    _, codes = encode_dataset(model, samples, preprocess)
    ordered = sorted(samples, key=lambda s: s.id)
    if not ordered:
        return RetrievalDatabase.empty(model.code_length)
    return RetrievalDatabase.from_bits(codes, [s.labels for s in ordered], [s.id for s in ordered])


def encode_manifest(checkpoint, manifest, ids: Sequence[int] | None = None) -> tuple[RetrievalDatabase, dict]:
    from .data import Preprocess

    model, meta = load_model(checkpoint)
    samples = load_samples(manifest, ids)
    return encode_to_database(model, samples, Preprocess.from_dict(meta["preprocess"])), meta


def sidecar_meta(meta: dict, subset: str) -> dict:
    return {
        "config_hash": meta.get("config_hash", ""),
        "dataset": meta.get("dataset", ""),
        "loss": meta.get("loss", ""),
        "backbone_width": meta["backbone"]["base_width"],
        "bits": meta["head"]["code_length"],
        "seed": meta.get("seed", 0),
        "subset": subset,
    }


def run_benchmark(cfg: ExperimentConfig, out_dir, samples: Sequence[Sample] | None = None) -> BenchmarkReport:
    """Train all runs, encode test queries and the database, report mean mAP@k."""
    out = Path(out_dir)
    samples = load_dataset(cfg) if samples is None else samples
    results = run_training(cfg, out, samples)
    split = load_split(out / "split.json")
    by_id = {s.id: s for s in samples}
    db_ids = subset_ids(split, "database", cfg.data.include_train_in_db)
    maps, nq = [], 0
    for r, res in enumerate(results):
        prep = cfg.train.resolved_preprocess
        db = encode_to_database(res.model, [by_id[i] for i in db_ids], prep)
        queries = encode_to_database(res.model, [by_id[i] for i in split.test_ids], prep)
        score = evaluate(db, queries, cfg.map_k)
        log.info("run %d mAP@%d = %.4f (%d queries, %d without relevant items)",
                 r, cfg.map_k, score.map, score.num_queries, score.zero_relevant)
        maps.append(score.map)
        nq = score.num_queries
    entry = BenchmarkEntry(
        dataset=cfg.data.name,
        loss=cfg.train.loss.name,
        backbone=f"W{cfg.train.backbone.base_width}",
        bits=cfg.train.code_length,
        run_maps=maps,
        run_seeds=cfg.train.run_seeds(),
        num_queries=nq,
        k=cfg.map_k,
        config_hash=cfg.config_hash,
    )
    return BenchmarkReport([entry])


def manifest_length(path) -> int:
    return len(read_manifest(path))

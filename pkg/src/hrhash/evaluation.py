"""Average precision over Hamming rankings and benchmark reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .retrieval import RetrievalDatabase, search

PAPER_MAP_K = {"cifar10": 1000, "nuswide": 1000, "mscoco": 1000, "imagenet": 5000}
DATASET_TITLES = {"cifar10": "CIFAR 10", "nuswide": "NUS WIDE", "mscoco": "MS COCO", "imagenet": "ImageNet"}


@dataclass(frozen=True)
class QueryRelevance:
    ids: np.ndarray
    distances: np.ndarray
    relevant: np.ndarray  # bool per rank
    total_relevant: int = -1  # relevant items in the whole database; -1 if unknown

    def __post_init__(self):
        if len(self.relevant) != len(self.ids):
            raise InvalidInputError("relevance and ranking lengths differ")

    @classmethod
    def from_flags(cls, flags: Sequence[int | bool]) -> "QueryRelevance":
        flags = np.asarray(flags, dtype=bool)
        n = len(flags)
        return cls(np.arange(n), np.zeros(n, np.int64), flags)


def average_precision_at_k(rel: QueryRelevance, k: int) -> float:
    """Mean of precision@i over the relevant ranks i <= k.

    The denominator counts relevant items retrieved within the first k, so a
    query whose top-k is entirely relevant scores 1.0 and one with no
    relevant hit scores 0.0.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    hits = np.asarray(rel.relevant[:k], dtype=bool)
    ranks = np.flatnonzero(hits) + 1
    if ranks.size == 0:
        return 0.0
    found = np.arange(1, ranks.size + 1)
    return math.fsum((found / ranks).tolist()) / ranks.size


def mean_average_precision(queries: Sequence[QueryRelevance], k: int) -> float:
    if len(queries) == 0:
        raise InvalidInputError("mAP needs at least one query")
    return math.fsum(average_precision_at_k(q, k) for q in queries) / len(queries)


def query_relevance(db: RetrievalDatabase, code, labels, top_k: int, exclude_id: int | None = None) -> QueryRelevance:
    """Ranked relevance of the top ``top_k``; ``exclude_id`` drops that database id first."""
    labels = frozenset(labels)
    res = search(db, code, top_k + (exclude_id is not None))
    keep = np.ones(len(res.ids), bool) if exclude_id is None else res.ids != exclude_id
    idx = res.indices[keep][:top_k]
    rel = np.array([not labels.isdisjoint(db.labels[i]) for i in idx], dtype=bool)
    total = sum(not labels.isdisjoint(ls) for j, ls in enumerate(db.labels) if exclude_id is None or db.ids[j] != exclude_id)
    return QueryRelevance(db.ids[idx], res.distances[keep][:top_k], rel, total)


@dataclass(frozen=True)
class RetrievalScore:
    map: float
    average_precisions: tuple[float, ...]
    num_queries: int
    zero_relevant: int  # queries with no relevant item anywhere in the database
    k: int


def evaluate(db: RetrievalDatabase, queries: RetrievalDatabase, k: int, exclude_self: bool = False) -> RetrievalScore:
    """mAP@k of every query code in ``queries`` against ``db``.

    ``exclude_self`` skips the database entry sharing the query's id, for the
    diagnostic mode where queries are drawn from the database itself.
    """
    if queries.n == 0:
        raise InvalidInputError("query set is empty")
    if queries.k != db.k:
        raise InvalidInputError(f"code length mismatch: queries {queries.k}, database {db.k}")
    rels = [
        query_relevance(db, queries.codes[i], queries.labels[i], k, int(queries.ids[i]) if exclude_self else None)
        for i in range(queries.n)
    ]
    aps = tuple(average_precision_at_k(r, k) for r in rels)
    return RetrievalScore(
        map=math.fsum(aps) / len(aps),
        average_precisions=aps,
        num_queries=len(aps),
        zero_relevant=sum(r.total_relevant == 0 for r in rels),
        k=k,
    )


@dataclass
class BenchmarkEntry:
    dataset: str
    loss: str
    backbone: str  # e.g. "W64"
    bits: int
    run_maps: list[float]
    run_seeds: list[int]
    num_queries: int
    k: int
    config_hash: str = ""

    @property
    def mean_map(self) -> float:
        return math.fsum(self.run_maps) / len(self.run_maps)

    def __post_init__(self):
        if not self.run_maps or len(self.run_maps) != len(self.run_seeds):
            raise InvalidInputError("a benchmark entry needs one seed per run, at least one run")
        if any(not 0.0 <= m <= 1.0 for m in self.run_maps):
            raise InvalidInputError("mAP values must lie in [0, 1]")


@dataclass
class BenchmarkReport:
    entries: list[BenchmarkEntry] = field(default_factory=list)

    def add(self, entry: BenchmarkEntry) -> None:
        self.entries.append(entry)


def format_map(value: float) -> str:
    """mAP as a percentage with one decimal, e.g. 0.915 -> '91.5'."""
    return f"{100.0 * value:.1f}"


def _width_value(backbone: str) -> int | str:
    digits = "".join(c for c in backbone if c.isdigit())
    return int(digits) if digits else backbone


def report_records(report: BenchmarkReport) -> list[dict]:
    rows = []
    for e in report.entries:
        for seed, m in zip(e.run_seeds, e.run_maps):
            rows.append(
                {
                    "dataset": e.dataset,
                    "loss": e.loss,
                    "backbone_width": _width_value(e.backbone),
                    "bits": e.bits,
                    "run_seed": seed,
                    "map": m,
                    "num_queries": e.num_queries,
                    "k": e.k,
                    "config_hash": e.config_hash,
                }
            )
    return rows


def render_table(report: BenchmarkReport) -> str:
    """Rows are ``loss (backbone)``, columns are dataset x bits, cells mean mAP in percent."""
    if not report.entries:
        raise InvalidInputError("cannot render an empty report")
    datasets = list(dict.fromkeys(e.dataset for e in report.entries))
    bits = {d: sorted({e.bits for e in report.entries if e.dataset == d}) for d in datasets}
    row_keys = list(dict.fromkeys((e.loss, e.backbone) for e in report.entries))
    cells = {(e.loss, e.backbone, e.dataset, e.bits): format_map(e.mean_map) for e in report.entries}

    labels = [f"{loss} ({bb})" for loss, bb in row_keys]
    lw = max([len("number of bits (k)")] + [len(x) for x in labels])
    cw = 5
    group_w = {d: len(bits[d]) * (cw + 1) - 1 for d in datasets}
    for d in datasets:
        group_w[d] = max(group_w[d], len(DATASET_TITLES.get(d, d)))

    def group(d, values):
        return " ".join(v.rjust(cw) for v in values).rjust(group_w[d])

    lines = [
        " " * lw + " | " + " | ".join(DATASET_TITLES.get(d, d).center(group_w[d]) for d in datasets),
        "number of bits (k)".ljust(lw) + " | " + " | ".join(group(d, [str(b) for b in bits[d]]) for d in datasets),
    ]
    lines.append("-" * len(lines[1]))
    for (loss, bb), label in zip(row_keys, labels):
        vals = [group(d, [cells.get((loss, bb, d, b), "-") for b in bits[d]]) for d in datasets]
        lines.append(label.ljust(lw) + " | " + " | ".join(vals))
    return "\n".join(lines) + "\n"


def render_report(report: BenchmarkReport) -> tuple[str, list[dict]]:
    return render_table(report), report_records(report)


def write_report(report: BenchmarkReport, stem) -> tuple[str, str]:
    """Write ``<stem>.txt`` (table) and ``<stem>.jsonl`` (records); returns both paths."""
    table, records = render_report(report)
    txt, jsonl = f"{stem}.txt", f"{stem}.jsonl"
    with open(txt, "w") as f:
        f.write(table)
    with open(jsonl, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return txt, jsonl

"""Bit-packed Hamming database: exact search and the HHDB file format.

File layout (all little-endian)::

    b"HHDB" | u32 version=1 | u32 k | u64 n
    n x [ u64 id | ceil(k/64) x u64 packed words | u32 m | m x u32 label ]
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import HashCode, num_words, pack, unpack
from .errors import FormatError, InvalidInputError

MAGIC = b"HHDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def _as_packed(code, k: int | None = None) -> np.ndarray:
    if isinstance(code, HashCode):
        if k is not None and code.k != k:
            raise InvalidInputError(f"code length {code.k} does not match {k}")
        return code.packed
    a = np.asarray(code)
    if a.dtype == np.uint64:
        if k is not None and a.shape[-1] != num_words(k):
            raise InvalidInputError(f"packed code has {a.shape[-1]} words, expected {num_words(k)}")
        return a
    if k is not None and a.shape[-1] != k:
        raise InvalidInputError(f"code length {a.shape[-1]} does not match {k}")
    return pack(a)


def hamming_distance(a, b) -> int:
    """Number of differing bits between two codes of equal length.

    Accepts HashCodes, +/-1 vectors, or packed uint64 words (both the same kind).
    """
    a = a.bits if isinstance(a, HashCode) else np.asarray(a)
    b = b.bits if isinstance(b, HashCode) else np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.dtype != np.uint64:
        a, b = pack(a), pack(b)
    return int(np.bitwise_count(a ^ b).sum())


def hamming_distances(codes: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Distances from one packed query (W,) to every packed row of (n, W)."""
    return np.bitwise_count(codes ^ query).sum(axis=-1, dtype=np.int64)


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray  # positions in the database
    ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.indices)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.distances.tolist()))


class RetrievalDatabase:
    """Parallel arrays of packed codes, label sets and sample ids."""

    def __init__(self, k: int, codes: np.ndarray, labels: Sequence[Iterable[int]], ids):
        if not 1 <= k <= 4096:
            raise InvalidInputError(f"code length must be in [1, 4096], got {k}")
        codes = np.ascontiguousarray(np.asarray(codes, dtype=np.uint64).reshape(-1, num_words(k)))
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        labels = tuple(frozenset(int(c) for c in ls) for ls in labels)
        if not len(codes) == len(labels) == len(ids):
            raise InvalidInputError("codes, labels and ids must have the same length")
        if len(codes) and np.unpackbits(codes.view(np.uint8), axis=-1, bitorder="little")[:, k:].any():
            raise InvalidInputError("unused high bits must be zero")
        codes.setflags(write=False)
        ids.setflags(write=False)
        self.k = k
        self.codes = codes
        self.labels = labels
        self.ids = ids

    @classmethod
    def from_bits(cls, bits, labels, ids=None) -> "RetrievalDatabase":
        bits = np.asarray(bits)
        k = bits.shape[-1]
        if ids is None:
            ids = np.arange(len(bits))
        return cls(k, pack(bits) if len(bits) else np.zeros((0, num_words(k)), np.uint64), labels, ids)

    @classmethod
    def empty(cls, k: int) -> "RetrievalDatabase":
        return cls(k, np.zeros((0, num_words(k)), np.uint64), [], [])

    def __len__(self):
        return len(self.ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def bits(self) -> np.ndarray:
        return unpack(self.codes, self.k) if self.n else np.zeros((0, self.k), np.int8)

    def code(self, i: int) -> HashCode:
        return HashCode.from_packed(self.codes[i], self.k)

    def subset(self, positions) -> "RetrievalDatabase":
        positions = np.asarray(positions, dtype=np.int64)
        return RetrievalDatabase(self.k, self.codes[positions], [self.labels[p] for p in positions], self.ids[positions])

    def __eq__(self, other):
        return (
            isinstance(other, RetrievalDatabase)
            and self.k == other.k
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.ids, other.ids)
            and self.labels == other.labels
        )

    def __repr__(self):
        return f"RetrievalDatabase(n={self.n}, k={self.k})"


def search(db: RetrievalDatabase, query, top_k: int) -> RetrievalResult:
    """Exact top-k by Hamming distance; ties go to the smaller sample id."""
    if top_k < 1:
        raise InvalidInputError(f"top_k must be >= 1, got {top_k}")
    q = _as_packed(query, db.k)
    if db.n == 0:
        empty = np.zeros(0, np.int64)
        return RetrievalResult(empty, empty, empty)
    dist = hamming_distances(db.codes, q)
    m = min(top_k, db.n)
    if m < db.n:
        # keep every row tied with the m-th distance so the id tie-break stays exact
        cutoff = np.partition(dist, m - 1)[m - 1]
        cand = np.flatnonzero(dist <= cutoff)
    else:
        cand = np.arange(db.n)
    order = cand[np.lexsort((db.ids[cand], dist[cand]))][:m]
    return RetrievalResult(order, db.ids[order].copy(), dist[order])


def save_db(db: RetrievalDatabase, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_db(db))


def encode_db(db: RetrievalDatabase) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, db.k, db.n)]
    words = db.codes.astype("<u8")
    for i in range(db.n):
        labels = sorted(db.labels[i])
        parts.append(struct.pack("<Q", int(db.ids[i])))
        parts.append(words[i].tobytes())
        parts.append(struct.pack(f"<I{len(labels)}I", len(labels), *labels))
    return b"".join(parts)


def load_db(path) -> RetrievalDatabase:
    with open(path, "rb") as f:
        return decode_db(f.read())


def decode_db(buf: bytes) -> RetrievalDatabase:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, k, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if not 1 <= k <= 4096:
        raise FormatError(f"invalid code length {k}", 8)
    w = num_words(k)
    pos = _HEADER.size
    fixed = 8 + 8 * w + 4
    if n * fixed > len(buf) - pos:
        raise FormatError(f"record count {n} exceeds file size", 12)
    codes = np.zeros((n, w), dtype=np.uint64)
    ids = np.zeros(n, dtype=np.int64)
    labels = []
    for i in range(n):
        if pos + fixed > len(buf):
            raise FormatError(f"truncated record {i}", pos)
        ids[i] = struct.unpack_from("<Q", buf, pos)[0]
        codes[i] = np.frombuffer(buf, dtype="<u8", count=w, offset=pos + 8)
        (m,) = struct.unpack_from("<I", buf, pos + 8 + 8 * w)
        pos += fixed
        if pos + 4 * m > len(buf):
            raise FormatError(f"truncated label list in record {i}", pos)
        labels.append(struct.unpack_from(f"<{m}I", buf, pos))
        pos += 4 * m
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    try:
        return RetrievalDatabase(k, codes, labels, ids)
    except InvalidInputError as e:
        raise FormatError(str(e), _HEADER.size) from e


def write_sidecar(path, meta: dict) -> None:
    with open(os.fspath(path) + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def read_sidecar(path) -> dict | None:
    p = os.fspath(path) + ".meta.json"
    if not os.path.exists(p):
        return None
    with open(p) as f:
        return json.load(f)

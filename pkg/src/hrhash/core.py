"""Domain vocabulary: samples, label sets, similarity, hash codes and splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

LabelSet = frozenset

WORD_BITS = 64
MAX_CODE_LENGTH = 4096


def label_set(labels: Iterable[int]) -> frozenset[int]:
    out = frozenset(int(x) for x in labels)
    if any(x < 0 for x in out):
        raise InvalidInputError(f"label ids must be non-negative, got {sorted(out)}")
    return out


@dataclass(frozen=True, eq=False)
class Sample:
    pixels: np.ndarray
    labels: frozenset[int]
    id: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or min(px.shape) < 1:
            raise InvalidInputError(f"pixels must have shape (C, H, W), got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError(f"sample {self.id} has non-finite pixels")
        if self.id < 0:
            raise InvalidInputError(f"sample id must be non-negative, got {self.id}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "labels", label_set(self.labels))


def similarity(a: Iterable[int], b: Iterable[int]) -> int:
    """1 if the two label sets share a class, else 0."""
    a, b = frozenset(a), frozenset(b)
    if not a or not b:
        raise InvalidInputError("similarity is undefined for an empty label set")
    return int(not a.isdisjoint(b))


def multi_hot(labels: Sequence[Iterable[int]], num_classes: int | None = None) -> np.ndarray:
    sets = [frozenset(x) for x in labels]
    if num_classes is None:
        num_classes = 1 + max((max(s) for s in sets if s), default=-1)
    out = np.zeros((len(sets), num_classes), dtype=np.float32)
    for i, s in enumerate(sets):
        for c in s:
            out[i, c] = 1.0
    return out


def similarity_matrix(labels: Sequence[Iterable[int]]) -> np.ndarray:
    """Dense (n, n) 0/1 matrix of pairwise label-set intersection."""
    sets = [frozenset(x) for x in labels]
    if any(not s for s in sets):
        raise InvalidInputError("similarity is undefined for an empty label set")
    y = multi_hot(sets)
    return (y @ y.T > 0).astype(np.uint8)


def num_words(k: int) -> int:
    return -(-k // WORD_BITS)


def _check_length(k: int) -> None:
    if not 1 <= k <= MAX_CODE_LENGTH:
        raise InvalidInputError(f"code length must be in [1, {MAX_CODE_LENGTH}], got {k}")


def pack(bits) -> np.ndarray:
    """Pack +/-1 codes into little-endian uint64 words.

    Bit ``i`` of the code lives at bit ``i % 64`` of word ``i // 64``; +1 is
    stored as a set bit. Accepts a single code of shape (k,) or a batch
    of shape (n, k) and returns (words,) or (n, words) respectively.
    """
    b = np.asarray(bits)
    if b.ndim not in (1, 2):
        raise InvalidInputError(f"expected 1-D or 2-D codes, got shape {b.shape}")
    k = b.shape[-1]
    _check_length(k)
    if not np.all((b == 1) | (b == -1)):
        raise InvalidInputError("code entries must be -1 or +1")
    ones = b == 1
    pad = num_words(k) * WORD_BITS - k
    if pad:
        widths = [(0, 0)] * (ones.ndim - 1) + [(0, pad)]
        ones = np.pad(ones, widths)
    packed = np.packbits(ones, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def unpack(words, k: int) -> np.ndarray:
    """Inverse of :func:`pack`; returns int8 codes in {-1, +1}."""
    _check_length(k)
    w = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    if w.shape[-1] != num_words(k):
        raise InvalidInputError(f"expected {num_words(k)} words for k={k}, got {w.shape[-1]}")
    raw = np.unpackbits(w.view(np.uint8), axis=-1, bitorder="little")
    if raw[..., k:].any():
        raise InvalidInputError("unused high bits must be zero")
    return np.where(raw[..., :k] == 1, 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class HashCode:
    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 1:
            raise InvalidInputError(f"a hash code is one-dimensional, got shape {b.shape}")
        _check_length(b.shape[0])
        if not np.all((b == 1) | (b == -1)):
            raise InvalidInputError("code entries must be -1 or +1")
        b = b.astype(np.int8)
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_packed(cls, words, k: int) -> "HashCode":
        return cls(unpack(words, k))

    @property
    def k(self) -> int:
        return self.bits.shape[0]

    @property
    def packed(self) -> np.ndarray:
        return pack(self.bits)

    def __eq__(self, other):
        return isinstance(other, HashCode) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    database_ids: tuple[int, ...]
    protocol: str = ""
    seed: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("train_ids", "test_ids", "val_ids", "database_ids"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        seen: set[int] = set()
        for name in ("train_ids", "test_ids", "val_ids", "database_ids"):
            ids = getattr(self, name)
            s = set(ids)
            if len(s) != len(ids):
                raise InvalidInputError(f"{name} contains duplicate ids")
            if seen & s:
                raise InvalidInputError(f"{name} overlaps another split")
            seen |= s

    def check_within(self, n: int) -> None:
        for name in ("train_ids", "test_ids", "val_ids", "database_ids"):
            ids = getattr(self, name)
            if ids and (min(ids) < 0 or max(ids) >= n):
                raise InvalidInputError(f"{name} references ids outside [0, {n})")

    def database_with_train(self) -> tuple[int, ...]:
        return tuple(sorted(self.database_ids + self.train_ids))

"""Dataset ingestion, benchmark split protocols and a synthetic generator."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Sample, SplitSpec, label_set
from .errors import ConfigError, InvalidInputError, ProtocolError


@dataclass(frozen=True)
class DatasetProtocol:
    """Sampling rule for train/test/val; whatever is left becomes the database.

    ``per_class`` draws the counts from every class separately (single-label
    data). ``top_concepts`` keeps only samples tagged with one of the most
    frequent concepts; ``keep_classes`` keeps a seeded subset of classes.
    """

    name: str
    train: int
    test: int
    val: int
    per_class: bool = False
    top_concepts: int | None = None
    keep_classes: int | None = None

    def __post_init__(self):
        if min(self.train, self.test, self.val) < 0:
            raise ConfigError("protocol counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetProtocol":
        d = dict(d)
        name = d.get("name")
        if name in PROTOCOLS and set(d) == {"name"}:
            return PROTOCOLS[name]
        base = asdict(PROTOCOLS[name]) if name in PROTOCOLS else {}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown protocol keys: {sorted(unknown)}")
        base.update(d)
        try:
            return cls(**base)
        except TypeError as e:
            raise ConfigError(f"incomplete protocol {d}: {e}") from None


PROTOCOLS = {
    "cifar10": DatasetProtocol("cifar10", train=500, test=100, val=100, per_class=True),
    "nuswide": DatasetProtocol("nuswide", train=10_500, test=2_100, val=2_100, top_concepts=21),
    "mscoco": DatasetProtocol("mscoco", train=10_000, test=5_000, val=5_000),
    "imagenet": DatasetProtocol("imagenet", train=13_000, test=2_500, val=2_500, keep_classes=100),
}


def top_concepts(labels: Sequence[Iterable[int]], n: int) -> list[int]:
    """The ``n`` most frequent tags; equal counts favour the smaller tag id."""
    counts = Counter(t for ls in labels for t in ls)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return sorted(t for t, _ in ranked[:n])


def filter_by_concepts(labels: Sequence[Iterable[int]], concepts: Iterable[int]) -> list[int]:
    keep = frozenset(concepts)
    return [i for i, ls in enumerate(labels) if not keep.isdisjoint(ls)]


def build_split(protocol: DatasetProtocol, labels: Sequence[Iterable[int]], seed: int) -> SplitSpec:
    """Seeded split of sample ids ``0..len(labels)-1`` under ``protocol``.

    Samples with an empty label set never enter any split. Id lists are
    returned sorted.
    """
    labels = [frozenset(ls) for ls in labels]
    rng = np.random.default_rng(seed)
    meta: dict = {}
    eligible = [i for i, ls in enumerate(labels) if ls]
    need = protocol.train + protocol.test + protocol.val

    if protocol.top_concepts is not None:
        concepts = top_concepts(labels, protocol.top_concepts)
        keep = frozenset(concepts)
        eligible = [i for i in eligible if not keep.isdisjoint(labels[i])]
        meta["retained_concepts"] = concepts
    if protocol.keep_classes is not None:
        classes = sorted({c for i in eligible for c in labels[i]})
        if len(classes) < protocol.keep_classes:
            raise ProtocolError(
                f"{protocol.name}: dataset has {len(classes)} classes, protocol keeps {protocol.keep_classes}"
            )
        kept = sorted(int(c) for c in rng.permutation(classes)[: protocol.keep_classes])
        keep = frozenset(kept)
        eligible = [i for i in eligible if labels[i] <= keep]
        meta["retained_classes"] = kept

    parts: list[list[int]] = [[], [], []]
    taken: set[int] = set()
    if protocol.per_class:
        by_class: dict[int, list[int]] = {}
        for i in eligible:
            by_class.setdefault(min(labels[i]), []).append(i)
        for c in sorted(by_class):
            ids = by_class[c]
            if len(ids) < need:
                raise ProtocolError(f"{protocol.name}: class {c} has {len(ids)} samples, protocol needs {need}")
            perm = rng.permutation(ids)
            _deal(perm, protocol, parts)
    else:
        if len(eligible) < need:
            raise ProtocolError(f"{protocol.name}: pool has {len(eligible)} samples, protocol needs {need}")
        _deal(rng.permutation(eligible), protocol, parts)
    for p in parts:
        taken.update(p)
    database = [i for i in eligible if i not in taken]
    train, test, val = (sorted(p) for p in parts)
    return SplitSpec(train, test, val, database, protocol=protocol.name, seed=seed, metadata=meta)


def _deal(perm, protocol, parts):
    a, b = protocol.train, protocol.train + protocol.test
    parts[0] += perm[:a].tolist()
    parts[1] += perm[a:b].tolist()
    parts[2] += perm[b : b + protocol.val].tolist()


def save_split(split: SplitSpec, path) -> None:
    rec = {
        "protocol": split.protocol,
        "seed": split.seed,
        "train_ids": list(split.train_ids),
        "test_ids": list(split.test_ids),
        "val_ids": list(split.val_ids),
        "database_ids": list(split.database_ids),
        "metadata": split.metadata,
    }
    with open(path, "w") as f:
        json.dump(rec, f, sort_keys=True)
        f.write("\n")


def load_split(path) -> SplitSpec:
    with open(path) as f:
        rec = json.load(f)
    try:
        return SplitSpec(
            rec["train_ids"], rec["test_ids"], rec["val_ids"], rec["database_ids"],
            protocol=rec.get("protocol", ""), seed=rec.get("seed", 0), metadata=rec.get("metadata", {}),
        )
    except KeyError as e:
        raise ConfigError(f"split file {path} lacks {e}") from None


# --- synthetic data --------------------------------------------------------


def class_pattern(c: int, num_classes: int, size: int, channels: int = 3) -> np.ndarray:
    """Deterministic signature for class ``c``: an oriented grating plus a bright blob.

    Orientation, spatial frequency, blob position and channel mix all depend
    on ``c``, so no two classes share a pattern.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = math.pi * c / num_classes
    freq = 2 + (c % 3)
    grating = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + c)
    golden = 0.6180339887498949
    cy, cx = (0.2 + 0.6 * ((c * golden) % 1.0)), (0.2 + 0.6 * ((c * golden * golden + 0.5) % 1.0))
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08**2))
    out = np.empty((channels, size, size))
    for ch in range(channels):
        mix = 0.5 + 0.5 * math.cos(2 * math.pi * (c / num_classes + ch / channels))
        out[ch] = 0.55 * (mix * grating + (1 - mix) * (1 - grating)) + 0.4 * blob
    return np.clip(out, 0.0, 1.0)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    image_size: int = 32,
    noise_level: float = 0.05,
    seed: int = 0,
    multi_label: bool = False,
    channels: int = 3,
) -> list[Sample]:
    """Class-major list of samples with ids ``0..num_classes*per_class-1``.

    In multi-label mode each image overlays (averages) the patterns of 1 to 3
    distinct classes and carries all of them as labels.
    """
    if num_classes < 2:
        raise InvalidInputError("need at least two classes")
    rng = np.random.default_rng(seed)
    patterns = [class_pattern(c, num_classes, image_size, channels) for c in range(num_classes)]
    samples = []
    for c in range(num_classes):
        for _ in range(per_class):
            if multi_label:
                m = int(rng.integers(1, min(3, num_classes) + 1))
                extra = rng.choice([x for x in range(num_classes) if x != c], size=m - 1, replace=False)
                classes = sorted({c, *extra.tolist()})
                base = np.mean([patterns[x] for x in classes], axis=0)
            else:
                classes = [c]
                base = patterns[c]
            noise = rng.normal(0.0, noise_level, size=base.shape) if noise_level > 0 else 0.0
            px = np.clip(base + noise, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(px, frozenset(classes), len(samples)))
    return samples


# --- manifests and images --------------------------------------------------


def read_manifest(path) -> list[tuple[str, frozenset[int]]]:
    """Parse ``<image path>\\t<comma-separated label ids>`` lines.

    Relative image paths are resolved against the manifest's directory;
    blank lines and ``#`` comments are skipped.
    """
    root = Path(path).parent
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            img, _, labels = line.partition("\t")
            try:
                ls = label_set(int(x) for x in labels.split(",") if x.strip())
            except ValueError as e:
                raise InvalidInputError(f"{path}:{lineno}: bad label list {labels!r}") from e
            p = Path(img)
            out.append((str(p if p.is_absolute() else root / p), ls))
    return out


def write_manifest(path, entries: Iterable[tuple[str, Iterable[int]]]) -> None:
    with open(path, "w") as f:
        for img, labels in entries:
            f.write(f"{img}\t{','.join(str(c) for c in sorted(labels))}\n")


def load_image(path) -> np.ndarray:
    """(C, H, W) float32 in [0, 1] from a ``.npy`` array or any Pillow-readable image."""
    if str(path).endswith(".npy"):
        a = np.load(path).astype(np.float32)
        return a[None] if a.ndim == 2 else a
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
        a = np.asarray(im, dtype=np.float32) / 255.0
    return a[None] if a.ndim == 2 else a.transpose(2, 0, 1)


def save_image(path, pixels: np.ndarray) -> None:
    from PIL import Image

    a = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0))
    img.save(path, format="PNG")


def load_samples(manifest, ids: Iterable[int] | None = None) -> list[Sample]:
    """Decode manifest entries; ids are line positions in the manifest."""
    entries = read_manifest(manifest)
    wanted = range(len(entries)) if ids is None else ids
    return [Sample(load_image(entries[i][0]), entries[i][1], i) for i in wanted]


def write_synthetic(out_dir, samples: Sequence[Sample], fmt: str = "png") -> Path:
    """Store samples as PNG (8-bit) or ``.npy`` (lossless) files plus ``manifest.tsv``."""
    if fmt not in ("png", "npy"):
        raise InvalidInputError(f"unknown image format {fmt!r}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        rel = f"images/{s.id:06d}.{fmt}"
        if fmt == "npy":
            np.save(out / rel, s.pixels)
        else:
            save_image(out / rel, s.pixels)
        entries.append((rel, s.labels))
    write_manifest(out / "manifest.tsv", entries)
    return out / "manifest.tsv"


# --- preprocessing ---------------------------------------------------------


@dataclass(frozen=True)
class Preprocess:
    input_size: tuple[int, int] = (224, 224)
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(x) for x in self.input_size))
        object.__setattr__(self, "mean", tuple(float(x) for x in self.mean))
        object.__setattr__(self, "std", tuple(float(x) for x in self.std))
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise ConfigError("normalization needs matching mean/std with positive std")

    def __call__(self, samples: Sequence[Sample]) -> torch.Tensor:
        """Stack, bilinearly resize to ``input_size`` and normalize per channel."""
        if len(samples) == 0:
            raise InvalidInputError("empty batch")
        x = torch.from_numpy(np.stack([s.pixels for s in samples]))
        if x.shape[1] != len(self.mean):
            if x.shape[1] == 1:
                x = x.expand(-1, len(self.mean), -1, -1)
            else:
                raise InvalidInputError(f"{x.shape[1]}-channel images, normalization has {len(self.mean)}")
        if tuple(x.shape[-2:]) != self.input_size:
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        mean = torch.tensor(self.mean).view(1, -1, 1, 1)
        std = torch.tensor(self.std).view(1, -1, 1, 1)
        return (x - mean) / std

    def to_dict(self) -> dict:
        return {"input_size": list(self.input_size), "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocess":
        return cls(**d)

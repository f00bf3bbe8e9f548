"""Experiment configuration: YAML/JSON file -> validated dataclasses.

Sections: ``data``, ``backbone``, ``head``, ``loss``, ``train``,
``evaluation`` and ``output_dir``. Unknown keys anywhere are rejected with
their dotted path.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .data import PROTOCOLS, DatasetProtocol, Preprocess
from .errors import ConfigError
from .evaluation import PAPER_MAP_K
from .head import HashHeadConfig
from .losses import LossConfig
from .trainer import TrainConfig

log = logging.getLogger(__name__)

BACKBONE_PRESETS = {
    "desk": lambda **kw: BackboneConfig.desk(**kw),
    **{f"w{w}": (lambda w: lambda **kw: BackboneConfig.hrnet(w, **kw))(w) for w in (18, 32, 48, 64)},
}


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    per_class: int = 200
    image_size: int = 32
    noise_level: float = 0.05
    seed: int = 0
    multi_label: bool = False


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticSpec | None = None
    manifest: str | None = None
    protocol: DatasetProtocol = PROTOCOLS["cifar10"]
    split_seed: int = 0
    split_file: str | None = None
    include_train_in_db: bool = False
    dataset: str = ""  # name used in reports; defaults to the protocol name

    @property
    def name(self) -> str:
        return self.dataset or ("synthetic" if self.synthetic else self.protocol.name)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig
    train: TrainConfig
    map_k: int
    output_dir: str = "runs"
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """Digest of the canonical JSON form, ignoring where outputs are written."""
    canon = {k: v for k, v in raw.items() if k != "output_dir"}
    blob = json.dumps(canon, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _section(raw, path: str, allowed) -> dict:
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    return dict(raw)


def _build(cls, raw, path, **extra):
    fields = {f.name for f in dataclasses.fields(cls)}
    d = _section(raw, path, fields - set(extra))
    try:
        return cls(**d, **extra)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _backbone(raw) -> BackboneConfig:
    d = _section(raw, "backbone", {f.name for f in dataclasses.fields(BackboneConfig)} | {"preset"})
    preset = d.pop("preset", None)
    try:
        if preset is None:
            return BackboneConfig(**d)
        if preset not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(BACKBONE_PRESETS)}")
        return BACKBONE_PRESETS[preset](**d)
    except (ConfigError, TypeError) as e:
        raise ConfigError(f"backbone: {e}") from None


def _data(raw, base_dir: Path | None) -> tuple[DataConfig, dict | None]:
    d = _section(raw, "data", {f.name for f in dataclasses.fields(DataConfig)} | {"normalization"})
    norm = d.pop("normalization", None)
    if d.get("synthetic") is not None:
        d["synthetic"] = _build(SyntheticSpec, d["synthetic"], "data.synthetic")
    if "protocol" in d:
        p = d["protocol"]
        if isinstance(p, str):
            p = {"name": p}
        try:
            d["protocol"] = DatasetProtocol.from_dict(_section(p, "data.protocol", DatasetProtocol.__dataclass_fields__))
        except ConfigError as e:
            raise ConfigError(f"data.protocol: {e}") from None
    for key in ("manifest", "split_file"):
        if d.get(key) and base_dir is not None and not Path(d[key]).is_absolute():
            d[key] = str((base_dir / d[key]).resolve())
    cfg = DataConfig(**d)
    if (cfg.synthetic is None) == (cfg.manifest is None):
        raise ConfigError("data: give exactly one of 'synthetic' or 'manifest'")
    return cfg, norm


def from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    """Validate ``raw``; relative data paths resolve against ``base_dir``."""
    raw = _section(raw, "config", {"data", "backbone", "head", "loss", "train", "evaluation", "output_dir"})
    if "data" not in raw:
        raise ConfigError("config: missing 'data' section")
    data, norm = _data(raw["data"], Path(base_dir) if base_dir is not None else None)
    backbone = _backbone(raw.get("backbone"))
    head = _build(HashHeadConfig, raw.get("head"), "head")
    loss = _build(LossConfig, raw.get("loss"), "loss")
    pre = None
    if norm is not None:
        n = _section(norm, "data.normalization", {"mean", "std"})
        try:
            pre = Preprocess(backbone.input_size, **n)
        except (ConfigError, TypeError) as e:
            raise ConfigError(f"data.normalization: {e}") from None
    train = _build(TrainConfig, raw.get("train"), "train", backbone=backbone, head=head, loss=loss, preprocess=pre)
    ev = _section(raw.get("evaluation"), "evaluation", {"map_k"})
    map_k = int(ev.get("map_k", PAPER_MAP_K.get(data.protocol.name, 1000)))
    if map_k < 1:
        raise ConfigError("evaluation.map_k: must be >= 1")
    return ExperimentConfig(data, train, map_k, str(raw.get("output_dir", "runs")), raw=copy.deepcopy(raw))


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars/lists."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key}: {p} is not a section")
            node = nxt
        node[parts[-1]] = yaml.safe_load(value)
        log.info("override %s = %r", key, node[parts[-1]])
    return raw


def load_config(path, overrides=None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(apply_overrides(raw, overrides), base_dir=p.parent)

"""Mini-batch Adam training of backbone + hash layer under a pairwise loss."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig
from .core import Sample, SplitSpec, multi_hot
from .data import Preprocess
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .head import HashHeadConfig, beta_for_epoch, binarize
from .losses import LossConfig, PairwiseBatch, PairwiseLoss, make_loss, total_loss
from .model import HashingModel, build_model

log = logging.getLogger(__name__)

NEAR_ZERO = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HashHeadConfig = field(default_factory=HashHeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 1e-5
    head_learning_rate: float | None = None  # None: same as learning_rate
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 20
    runs: int = 4
    seed: int = 0
    preprocess: Preprocess | None = None  # None: default constants at backbone input size
    recalibrate_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if not self.learning_rate > 0 or (self.head_learning_rate is not None and not self.head_learning_rate > 0):
            raise ConfigError("learning rates must be positive")
        if self.preprocess is not None and self.preprocess.input_size != self.backbone.input_size:
            raise ConfigError("preprocess.input_size must equal backbone.input_size")

    @property
    def code_length(self) -> int:
        return self.head.code_length

    @property
    def resolved_head(self) -> HashHeadConfig:
        return self.head.resolved(self.loss.name)

    @property
    def resolved_preprocess(self) -> Preprocess:
        return self.preprocess or Preprocess(self.backbone.input_size)

    def run_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.runs)]


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    pairwise: float
    quantization: float
    batches: int
    beta: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class TrainResult:
    model: HashingModel
    loss: PairwiseLoss
    log: list[EpochRecord]
    wall_times: list[float]
    seed: int


def batches(ids: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Seeded shuffle into batches; a trailing batch smaller than 2 is dropped."""
    perm = rng.permutation(np.asarray(ids, dtype=np.int64)).tolist()
    out = [perm[i : i + batch_size] for i in range(0, len(perm), batch_size)]
    if out and len(out[-1]) < 2:
        out.pop()
    return out


def _check_finite(model: torch.nn.Module, epoch: int):
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise TrainingDivergedError(epoch, -1, {"parameter": name})


def train(
    cfg: TrainConfig,
    split: SplitSpec,
    data: Sequence[Sample],
    seed: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train one run. ``data`` is indexed by sample id through ``Sample.id``.

    Determinism: the seed fixes weight init, proxy init and batch order, and
    the loop runs single-threaded, so repeated calls give identical logs.
    """
    seed = cfg.seed if seed is None else seed
    by_id = {s.id: s for s in data}
    missing = [i for i in split.train_ids if i not in by_id]
    if missing:
        raise InvalidInputError(f"{len(missing)} training ids are absent from the data, e.g. {missing[0]}")
    if len(split.train_ids) < 2:
        raise InvalidInputError("training split needs at least two samples")
    num_classes = 1 + max(c for s in data for c in s.labels)

    torch.manual_seed(seed)
    model = build_model(cfg.backbone, cfg.resolved_head, seed)
    loss_fn = make_loss(cfg.loss, cfg.code_length, num_classes)
    head_lr = cfg.head_learning_rate or cfg.learning_rate
    groups = [
        {"params": list(model.backbone.parameters()), "lr": cfg.learning_rate},
        {"params": list(model.head.parameters()) + list(loss_fn.parameters()), "lr": head_lr},
    ]
    opt = torch.optim.Adam(groups, betas=cfg.betas, eps=cfg.eps)
    prep = cfg.resolved_preprocess
    rng = np.random.default_rng(seed)
    scaled = cfg.resolved_head.activation == "scaled_tanh"

    history, times = [], []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        beta = None
        if scaled:
            beta = model.head.beta = cfg.resolved_head.beta * beta_for_epoch(epoch, cfg.epochs)
        model.train()
        totals, pairs, quants = [], [], []
        for b, ids in enumerate(batches(split.train_ids, cfg.batch_size, rng)):
            samples = [by_id[i] for i in ids]
            x = prep(samples)
            u = model(x)
            y = torch.from_numpy(multi_hot([s.labels for s in samples], num_classes))
            batch = PairwiseBatch(u, (y @ y.T > 0).to(u.dtype), y)
            parts = total_loss(batch, loss_fn)
            values = {k: float(v.detach()) for k, v in parts._asdict().items()}
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDivergedError(epoch + 1, b, values)
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            totals.append(values["total"])
            pairs.append(values["pairwise"])
            quants.append(values["quantization"])
        if not totals:
            raise InvalidInputError("no batch of size >= 2 could be formed")
        _check_finite(model, epoch + 1)
        n = len(totals)
        rec = EpochRecord(
            epoch + 1, math.fsum(totals) / n, math.fsum(pairs) / n, math.fsum(quants) / n, n, beta
        )
        history.append(rec)
        times.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.6f (pairwise %.6f, quant %.6f)", rec.epoch, rec.loss, rec.pairwise, rec.quantization)
        if on_epoch:
            on_epoch(rec)
    if cfg.recalibrate_batchnorm and cfg.backbone.train_batchnorm:
        recalibrate_batchnorm(model, [by_id[i] for i in split.train_ids], prep, cfg.batch_size)
    model.eval()
    return TrainResult(model, loss_fn, history, times, seed)


@torch.no_grad()
def recalibrate_batchnorm(model: torch.nn.Module, samples: Sequence[Sample], preprocess: Preprocess, batch_size: int = 128):
    """Replace BN running statistics with exact averages under the final weights.

    Running averages collected during training mix statistics from every
    intermediate weight state; a pass over ``samples`` in id order fixes
    that before evaluation-mode encoding.
    """
    bns = [m for m in model.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not bns or not samples:
        return
    momenta = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    ordered = sorted(samples, key=lambda s: s.id)
    chunks = [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] += chunks.pop()
    for chunk in chunks:
        model(preprocess(chunk))
    for m, mom in zip(bns, momenta):
        m.momentum = mom
    model.eval()


@torch.no_grad()
def encode_dataset(
    model: HashingModel, samples: Sequence[Sample], preprocess: Preprocess, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-mode embeddings (n, k) float32 and sign codes (n, k) int8, in id order."""
    model.eval()
    ordered = sorted(samples, key=lambda s: s.id)
    k = model.code_length
    if not ordered:
        return np.zeros((0, k), np.float32), np.zeros((0, k), np.int8)
    chunks = [model(preprocess(ordered[i : i + batch_size])) for i in range(0, len(ordered), batch_size)]
    u = torch.cat(chunks).numpy().astype(np.float32)
    near = int((np.abs(u) < NEAR_ZERO).sum())
    if near:
        log.warning("%d embedding entries within %g of zero; their bits are unstable", near, NEAR_ZERO)
    return u, binarize(u)


def write_log(path, records: Sequence[EpochRecord], config_hash: str = "") -> None:
    with open(path, "w") as f:
        for r in records:
            d = r.to_dict()
            if config_hash:
                d["config_hash"] = config_hash
            f.write(json.dumps(d, sort_keys=True) + "\n")


def write_timing(path, wall_times: Sequence[float]) -> None:
    with open(path, "w") as f:
        for e, t in enumerate(wall_times, 1):
            f.write(json.dumps({"epoch": e, "wall_time": t}) + "\n")


def smoothed(values: Sequence[float], window: int = 5) -> list[float]:
    """Trailing moving average (shorter window at the start)."""
    out = []
    for i in range(len(values)):
        w = values[max(0, i - window + 1) : i + 1]
        out.append(math.fsum(w) / len(w))
    return out

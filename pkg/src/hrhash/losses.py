"""Pairwise hashing objectives over relaxed Hamming distances.

Every plugin scores each unordered pair of a batch with ``l_S(d)`` when the
pair is similar and ``l_D(d)`` otherwise, where ``d = (k - <u_i, u_j>) / 2``.
Pair scores may be reweighted per pair (class imbalance), averaged over the
``B (B - 1) / 2`` pairs, and combined with ``lambda`` times the mean
per-sample quantization error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError
from .head import NORMS, quantization_error

DCH_MIN_DISTANCE = 1e-6


@dataclass(frozen=True)
class LossConfig:
    name: str = "DPSH"
    quantization_weight: float = 0.1
    quantization_norm: str | None = None  # None: the plugin's default
    gamma: float = 20.0
    balanced: bool = True
    alpha: float | None = None  # HashNet inner-product scale; None: 10 / k
    margin: float = 0.0  # HyP2 cosine margin for dissimilar pairs
    sigma: float | None = None  # WGLHH kernel width; None: k / 4

    def __post_init__(self):
        if self.name not in LOSSES:
            raise ConfigError(f"unknown loss {self.name!r}; available: {sorted(LOSSES)}")
        if not self.quantization_weight >= 0:
            raise ConfigError(f"quantization_weight must be >= 0, got {self.quantization_weight}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.quantization_norm is not None and self.quantization_norm not in NORMS:
            raise ConfigError(f"quantization_norm must be one of {NORMS}")
        for name in ("alpha", "sigma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


class PairwiseBatch(NamedTuple):
    embeddings: torch.Tensor  # (B, k)
    similarity: torch.Tensor  # (B, B) in {0, 1}
    labels: torch.Tensor | None = None  # (B, C) multi-hot, for proxy terms

    @classmethod
    def from_labels(cls, embeddings, label_sets, num_classes=None) -> "PairwiseBatch":
        from .core import multi_hot

        y = torch.from_numpy(multi_hot(label_sets, num_classes)).to(embeddings.dtype)
        if (y.sum(1) == 0).any():
            raise InvalidInputError("every sample in a pairwise batch needs a label")
        s = (y @ y.T > 0).to(embeddings.dtype)
        return cls(embeddings, s, y)


class LossParts(NamedTuple):
    total: torch.Tensor
    pairwise: torch.Tensor
    quantization: torch.Tensor


def relaxed_hamming(u_i: torch.Tensor, u_j: torch.Tensor) -> torch.Tensor:
    if u_i.shape[-1] != u_j.shape[-1]:
        raise InvalidInputError(f"length mismatch: {u_i.shape[-1]} vs {u_j.shape[-1]}")
    k = u_i.shape[-1]
    return (k - (u_i * u_j).sum(-1)) / 2


def imbalance_weights(s: torch.Tensor, similar_only: bool) -> torch.Tensor:
    """Per-pair weights |S| / |S_c| for the pair's class c.

    With ``similar_only`` dissimilar pairs keep weight 1 (Cauchy hashing).
    """
    n = s.numel()
    n_sim = s.sum()
    n_dis = n - n_sim
    w_sim = n / n_sim.clamp(min=1)
    w_dis = torch.ones_like(n_sim) if similar_only else n / n_dis.clamp(min=1)
    return s * w_sim + (1 - s) * w_dis


class PairwiseLoss(nn.Module):
    """Base plugin; subclasses supply ``similar_term`` and ``dissimilar_term``."""

    name = ""
    default_norm = "l2"

    def __init__(self, cfg: LossConfig, code_length: int, num_classes: int | None = None):
        super().__init__()
        self.cfg = cfg
        self.k = code_length
        self.num_classes = num_classes

    def similar_term(self, d: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def dissimilar_term(self, d: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def pair_weights(self, s: torch.Tensor) -> torch.Tensor:
        return torch.ones_like(s)

    def pair_terms(self, u: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """Weighted loss for each unordered pair (i < j), flattened."""
        i, j = torch.triu_indices(u.shape[0], u.shape[0], 1)
        d = relaxed_hamming(u[i], u[j])
        sp = s[i, j]
        return self.pair_weights(sp) * (sp * self.similar_term(d) + (1 - sp) * self.dissimilar_term(d))

    def extra_term(self, batch: PairwiseBatch) -> torch.Tensor:
        return batch.embeddings.new_zeros(())

    @property
    def norm(self) -> str:
        return self.cfg.quantization_norm or self.default_norm


class CEL(PairwiseLoss):
    """Binary cross-entropy of sigmoid(<u_i, u_j> / k) against similarity."""

    name = "CEL"

    def similar_term(self, d):
        return F.softplus(2 * d / self.k - 1)

    def dissimilar_term(self, d):
        return F.softplus(1 - 2 * d / self.k)


class DPSH(PairwiseLoss):
    """Pairwise negative log-likelihood with theta = <u_i, u_j> / 2."""

    name = "DPSH"

    def similar_term(self, d):
        # log(1 + e^theta) - theta with theta = k/2 - d
        return F.softplus(d - self.k / 2)

    def dissimilar_term(self, d):
        return F.softplus(self.k / 2 - d)


class DHN(DPSH):
    name = "DHN"
    default_norm = "smooth_l1"


class DCH(PairwiseLoss):
    """Cauchy cross-entropy with kernel gamma / (gamma + d)."""

    name = "DCH"

    def _clamped(self, d):
        return d.clamp(min=DCH_MIN_DISTANCE)

    def similar_term(self, d):
        return torch.log1p(self._clamped(d) / self.cfg.gamma)

    def dissimilar_term(self, d):
        return torch.log1p(self.cfg.gamma / self._clamped(d))

    def pair_weights(self, s):
        if not self.cfg.balanced:
            return torch.ones_like(s)
        return imbalance_weights(s, similar_only=True)


class HashNet(PairwiseLoss):
    """Weighted pairwise likelihood with theta = alpha * <u_i, u_j>.

    Meant to be paired with the scaled-tanh head and its beta continuation.
    """

    name = "HashNet"

    @property
    def alpha(self) -> float:
        return self.cfg.alpha if self.cfg.alpha is not None else 10.0 / self.k

    def similar_term(self, d):
        return F.softplus(-self.alpha * (self.k - 2 * d))

    def dissimilar_term(self, d):
        return F.softplus(self.alpha * (self.k - 2 * d))

    def pair_weights(self, s):
        if not self.cfg.balanced:
            return torch.ones_like(s)
        return imbalance_weights(s, similar_only=False)


class WGLHH(PairwiseLoss):
    """Gaussian-kernel likelihood on relaxed distances, imbalance-weighted.

    p(d) = exp(-d^2 / (2 sigma^2)); similar pairs pay -log p, dissimilar
    pairs -log(1 - p). A simplified member of the weighted Gaussian family,
    not a reproduction of any published weighting scheme.
    """

    name = "WGLHH"
    eps = 1e-6

    @property
    def sigma(self) -> float:
        return self.cfg.sigma if self.cfg.sigma is not None else self.k / 4

    def similar_term(self, d):
        return d * d / (2 * self.sigma**2)

    def dissimilar_term(self, d):
        p = torch.exp(-d * d / (2 * self.sigma**2))
        return -torch.log(1 - p + self.eps)

    def pair_weights(self, s):
        if not self.cfg.balanced:
            return torch.ones_like(s)
        return imbalance_weights(s, similar_only=False)


class HyP2(PairwiseLoss):
    """Proxy loss over a learnable per-class table plus a dissimilar-pair hinge.

    Each sample is pulled toward the proxies of its classes (1 - cos) and
    pushed below ``margin`` cosine from the others; dissimilar sample pairs
    pay relu(cos - margin).
    """

    name = "HyP2"

    def __init__(self, cfg, code_length, num_classes=None):
        super().__init__(cfg, code_length, num_classes)
        if not num_classes:
            raise ConfigError("HyP2 needs the number of classes to size its proxy table")
        self.proxies = nn.Parameter(torch.randn(num_classes, code_length) / math.sqrt(code_length))

    def pair_terms(self, u, s):
        i, j = torch.triu_indices(u.shape[0], u.shape[0], 1)
        cos = F.cosine_similarity(u[i], u[j], dim=-1)
        return (1 - s[i, j]) * F.relu(cos - self.cfg.margin)

    def extra_term(self, batch):
        if batch.labels is None:
            raise InvalidInputError("HyP2 needs multi-hot labels in the batch")
        u = batch.embeddings
        y = batch.labels.to(u.dtype)
        cos = F.normalize(u, dim=-1) @ F.normalize(self.proxies.to(u.dtype), dim=-1).T
        pos = ((1 - cos) * y).sum() / y.sum().clamp(min=1)
        neg = (F.relu(cos - self.cfg.margin) * (1 - y)).sum() / (1 - y).sum().clamp(min=1)
        return pos + neg


LOSSES: dict[str, type[PairwiseLoss]] = {
    cls.name: cls for cls in (CEL, DHN, DPSH, DCH, HashNet, WGLHH, HyP2)
}
REQUIRED_LOSSES = ("CEL", "DHN", "DPSH", "DCH", "HashNet")
OPTIONAL_LOSSES = ("WGLHH", "HyP2")


def register_loss(cls: type[PairwiseLoss]) -> type[PairwiseLoss]:
    LOSSES[cls.name] = cls
    return cls


def make_loss(cfg: LossConfig, code_length: int, num_classes: int | None = None) -> PairwiseLoss:
    return LOSSES[cfg.name](cfg, code_length, num_classes)


def _check_batch(batch: PairwiseBatch):
    u = batch.embeddings
    if u.ndim != 2 or u.shape[0] < 2:
        raise InvalidInputError(f"pairwise losses need a (B>=2, k) batch, got {tuple(u.shape)}")
    if batch.similarity.shape != (u.shape[0], u.shape[0]):
        raise InvalidInputError("similarity matrix does not match the batch size")


def pairwise_loss(batch: PairwiseBatch, loss: PairwiseLoss) -> torch.Tensor:
    _check_batch(batch)
    terms = loss.pair_terms(batch.embeddings, batch.similarity.to(batch.embeddings.dtype))
    return terms.sum() / terms.numel() + loss.extra_term(batch)


def total_loss(batch: PairwiseBatch, loss: PairwiseLoss, norm: str | None = None) -> LossParts:
    ls = pairwise_loss(batch, loss)
    lq = quantization_error(batch.embeddings, norm or loss.norm).mean()
    return LossParts(ls + loss.cfg.quantization_weight * lq, ls, lq)


def loss_gradient(batch: PairwiseBatch, loss: PairwiseLoss, norm: str | None = None) -> torch.Tensor:
    """Gradient of the total loss with respect to the batch embeddings."""
    u = batch.embeddings.detach().clone().requires_grad_(True)
    parts = total_loss(batch._replace(embeddings=u), loss, norm)
    (grad,) = torch.autograd.grad(parts.total, u)
    return grad

"""Hash layer, sign binarization and quantization error."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, InvalidInputError

ACTIVATIONS = ("identity", "tanh", "scaled_tanh")
NORMS = ("l1", "l2", "smooth_l1")
BETA_SCHEDULE = (1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class HashHeadConfig:
    code_length: int = 32
    activation: str = "auto"  # "auto": scaled_tanh for HashNet, identity otherwise
    beta: float = 1.0

    def __post_init__(self):
        if not 1 <= self.code_length <= 4096:
            raise ConfigError(f"code_length must be in [1, 4096], got {self.code_length}")
        if self.activation not in ACTIVATIONS + ("auto",):
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")

    def resolved(self, loss_name: str) -> "HashHeadConfig":
        if self.activation != "auto":
            return self
        act = "scaled_tanh" if loss_name == "HashNet" else "identity"
        return HashHeadConfig(self.code_length, act, self.beta)

    def to_dict(self) -> dict:
        return asdict(self)


class HashHead(nn.Module):
    """One affine layer from pooled features to ``k`` continuous outputs."""

    def __init__(self, in_features: int, cfg: HashHeadConfig):
        super().__init__()
        if cfg.activation == "auto":
            raise ConfigError("resolve the activation before building the head")
        self.cfg = cfg
        self.fc = nn.Linear(in_features, cfg.code_length)
        self.beta = cfg.beta

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.fc.in_features:
            raise InvalidInputError(
                f"feature length {features.shape[-1]} does not match head input {self.fc.in_features}"
            )
        z = self.fc(features)
        if self.cfg.activation == "tanh":
            return torch.tanh(z)
        if self.cfg.activation == "scaled_tanh":
            return torch.tanh(self.beta * z)
        return z


def beta_for_epoch(epoch: int, epochs: int) -> float:
    """Continuation step: the next beta every quarter of training (0-based epoch)."""
    return BETA_SCHEDULE[min(len(BETA_SCHEDULE) - 1, epoch * len(BETA_SCHEDULE) // epochs)]


def binarize(u):
    """Sign with sign(0) = +1. Tensors in, tensors out; anything else goes through numpy."""
    if isinstance(u, torch.Tensor):
        if not torch.isfinite(u).all():
            raise InvalidInputError("cannot binarize non-finite embeddings")
        return torch.where(u >= 0, torch.ones_like(u), -torch.ones_like(u))
    a = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("cannot binarize non-finite embeddings")
    return np.where(a >= 0, 1, -1).astype(np.int8)


def quantization_error(u, norm: str = "l2"):
    """Distance from ``u`` to its sign code along the last axis.

    ``l2`` is the squared Euclidean distance, ``smooth_l1`` the Huber loss
    with unit threshold. With a batch of shape (B, k), returns (B,).
    """
    if norm not in NORMS:
        raise InvalidInputError(f"unknown quantization norm {norm!r}")
    t = u if isinstance(u, torch.Tensor) else torch.as_tensor(np.asarray(u, dtype=np.float64))
    r = t - binarize(t.detach())
    if norm == "l1":
        q = r.abs()
    elif norm == "l2":
        q = r * r
    else:
        a = r.abs()
        q = torch.where(a < 1.0, 0.5 * r * r, a - 0.5)
    out = q.sum(-1)
    return out if isinstance(u, torch.Tensor) else out.numpy()

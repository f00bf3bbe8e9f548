"""Backbone + hash layer, and the HHCKPT checkpoint container.

Checkpoint layout (little-endian)::

    b"HHCKPT\\0" | u32 version=1 | u64 header length L | L bytes UTF-8 JSON header
    | tensor payloads, concatenated in header order

The header holds ``meta`` (backbone/head configs, preprocessing, seed,
config hash) and ``tensors``: a list of {name, dtype, shape, offset, nbytes}
with offsets relative to the payload start.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, MultiResolutionBackbone, init_weights
from .data import Preprocess
from .errors import FormatError
from .head import HashHead, HashHeadConfig

CKPT_MAGIC = b"HHCKPT\0"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<7sIQ")
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


class HashingModel(nn.Module):
    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HashHeadConfig):
        super().__init__()
        self.backbone = MultiResolutionBackbone(backbone_cfg)
        self.head = HashHead(backbone_cfg.head_width, head_cfg)

    @property
    def code_length(self) -> int:
        return self.head.cfg.code_length

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))


def build_model(backbone_cfg: BackboneConfig, head_cfg: HashHeadConfig, seed: int = 0) -> HashingModel:
    model = HashingModel(backbone_cfg, head_cfg)
    init_weights(model, seed)
    return model


def write_checkpoint(path, meta: dict, tensors: "OrderedDict[str, torch.Tensor]") -> None:
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise TypeError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _PREFIX.size:
        raise FormatError("truncated checkpoint prefix", len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 7)
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise FormatError("truncated checkpoint header", len(buf))
    try:
        header = json.loads(buf[start : start + hlen])
    except ValueError as e:
        raise FormatError(f"corrupt checkpoint header: {e}", start) from None
    base = start + hlen
    tensors = OrderedDict()
    end = base
    for rec in header["tensors"]:
        lo = base + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(buf):
            raise FormatError(f"truncated tensor {rec['name']}", len(buf))
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(buf, dtype=dt, count=rec["nbytes"] // dt.itemsize, offset=lo)
        tensors[rec["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(rec["shape"])
        end = max(end, hi)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    return header["meta"], tensors


def save_model(path, model: HashingModel, seed: int, preprocess: Preprocess, extra: dict | None = None) -> None:
    meta = {
        "backbone": model.backbone.cfg.to_dict(),
        "head": model.head.cfg.to_dict(),
        "preprocess": preprocess.to_dict(),
        "seed": seed,
        "head_beta": float(model.head.beta),
        **(extra or {}),
    }
    write_checkpoint(path, meta, OrderedDict(model.state_dict()))


def load_model(path) -> tuple[HashingModel, dict]:
    meta, tensors = read_checkpoint(path)
    model = HashingModel(BackboneConfig.from_dict(meta["backbone"]), HashHeadConfig(**meta["head"]))
    model.load_state_dict(tensors)
    model.head.beta = meta.get("head_beta", model.head.cfg.beta)
    model.eval()
    return model, meta

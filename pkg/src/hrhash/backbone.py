"""Multi-resolution convolutional backbone with the augmented pooling head.

Stage 1 runs a single high-resolution branch of bottleneck blocks. Every
later stage adds one branch at half the resolution and twice the width of
the previous lowest branch, and each of its modules ends with a fusion step
where every branch receives the sum of all other branches resampled to its
resolution. The head bottlenecks each branch to ``128 * 2**r`` channels,
merges them from high to low resolution with stride-2 convolutions, lifts
the lowest-resolution map to ``head_width`` channels and average-pools it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvalidInputError

BN_MOMENTUM = 0.1
STEM_WIDTH = 64
HEAD_BASE = 32  # bottleneck planes for branch 0; channels = planes * 4


@dataclass(frozen=True)
class BackboneConfig:
    num_stages: int = 4
    base_width: int = 18
    blocks_per_branch: int = 4
    modules_per_stage: tuple[int, ...] = (1, 1, 4, 3)
    head_width: int = 2048
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 3
    train_batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "modules_per_stage", tuple(int(m) for m in self.modules_per_stage))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if not 1 <= self.num_stages <= 4:
            raise ConfigError(f"num_stages must be in [1, 4], got {self.num_stages}")
        if len(self.modules_per_stage) != self.num_stages:
            raise ConfigError(
                f"modules_per_stage has {len(self.modules_per_stage)} entries for {self.num_stages} stages"
            )
        if any(m < 1 for m in self.modules_per_stage):
            raise ConfigError("every stage needs at least one module")
        for name in ("base_width", "blocks_per_branch", "head_width", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.input_size) != 2 or any(s < 32 or s % 32 for s in self.input_size):
            raise ConfigError(f"input_size must be two positive multiples of 32, got {self.input_size}")

    @classmethod
    def hrnet(cls, width: int, **kw) -> "BackboneConfig":
        return cls(base_width=width, **kw)

    @classmethod
    def desk(cls, num_stages: int = 2, **kw) -> "BackboneConfig":
        """Small preset for CPU tests: C=8, 32x32 input, 256-wide head."""
        kw.setdefault("base_width", 8)
        kw.setdefault("head_width", 256)
        kw.setdefault("input_size", (32, 32))
        kw.setdefault("modules_per_stage", (1,) * num_stages)
        return cls(num_stages=num_stages, **kw)

    def branch_widths(self, stage: int) -> list[int]:
        """Channel widths of the branches in 1-based ``stage`` (>= 2)."""
        return [self.base_width * 2**r for r in range(stage)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modules_per_stage"] = list(self.modules_per_stage)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)


def conv3x3(cin, cout, stride=1, bias=False):
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=bias)


def bn(c):
    return nn.BatchNorm2d(c, momentum=BN_MOMENTUM)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        self.conv1 = conv3x3(inplanes, planes, stride)
        self.bn1 = bn(planes)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = bn(planes)
        self.downsample = downsample

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + residual)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, kernel_size=1, bias=False)
        self.bn1 = bn(planes)
        self.conv2 = conv3x3(planes, planes, stride)
        self.bn2 = bn(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, kernel_size=1, bias=False)
        self.bn3 = bn(planes * self.expansion)
        self.downsample = downsample

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + residual)


def make_layer(block, inplanes, planes, blocks, stride=1):
    downsample = None
    if stride != 1 or inplanes != planes * block.expansion:
        downsample = nn.Sequential(
            nn.Conv2d(inplanes, planes * block.expansion, kernel_size=1, stride=stride, bias=False),
            bn(planes * block.expansion),
        )
    layers = [block(inplanes, planes, stride, downsample)]
    layers += [block(planes * block.expansion, planes) for _ in range(1, blocks)]
    return nn.Sequential(*layers)


class MultiResolutionModule(nn.Module):
    """Parallel residual branches followed by all-to-all cross-resolution fusion."""

    def __init__(self, widths: list[int], blocks: int):
        super().__init__()
        self.widths = list(widths)
        self.branches = nn.ModuleList(make_layer(BasicBlock, w, w, blocks) for w in widths)
        n = len(widths)
        self.fuse = nn.ModuleList()
        for i in range(n):
            row = nn.ModuleList()
            for j in range(n):
                if j > i:
                    row.append(nn.Sequential(nn.Conv2d(widths[j], widths[i], 1, bias=False), bn(widths[i])))
                elif j == i:
                    row.append(nn.Identity())
                else:
                    steps = []
                    for s in range(i - j):
                        last = s == i - j - 1
                        cout = widths[i] if last else widths[j]
                        steps += [conv3x3(widths[j], cout, stride=2), bn(cout)]
                        if not last:
                            steps.append(nn.ReLU())
                    row.append(nn.Sequential(*steps))
            self.fuse.append(row)

    def forward(self, xs: list[torch.Tensor]) -> list[torch.Tensor]:
        xs = [branch(x) for branch, x in zip(self.branches, xs)]
        if len(xs) == 1:
            return xs
        out = []
        for i, row in enumerate(self.fuse):
            y = xs[i]
            for j, op in enumerate(row):
                if j == i:
                    continue
                z = op(xs[j])
                if j > i:
                    z = F.interpolate(z, size=xs[i].shape[-2:], mode="nearest")
                y = y + z
            out.append(F.relu(y))
        return out


class Transition(nn.Module):
    """Adapts the previous stage's branches and spawns the new lowest-resolution branch."""

    def __init__(self, prev: list[int], cur: list[int]):
        super().__init__()
        self.layers = nn.ModuleList()
        for i, c in enumerate(cur):
            if i < len(prev):
                if prev[i] != c:
                    self.layers.append(nn.Sequential(conv3x3(prev[i], c), bn(c), nn.ReLU()))
                else:
                    self.layers.append(nn.Identity())
            else:
                steps = []
                for s in range(i + 1 - len(prev)):
                    cout = c if s == i - len(prev) else prev[-1]
                    steps += [conv3x3(prev[-1], cout, stride=2), bn(cout), nn.ReLU()]
                self.layers.append(nn.Sequential(*steps))
        self.num_prev = len(prev)

    def forward(self, xs):
        return [layer(xs[min(i, self.num_prev - 1)]) for i, layer in enumerate(self.layers)]


class AugmentedHead(nn.Module):
    def __init__(self, widths: list[int], head_width: int):
        super().__init__()
        planes = [HEAD_BASE * 2**r for r in range(len(widths))]
        self.incre = nn.ModuleList(make_layer(Bottleneck, w, p, 1) for w, p in zip(widths, planes))
        self.down = nn.ModuleList(
            nn.Sequential(
                conv3x3(planes[r] * 4, planes[r + 1] * 4, stride=2, bias=True),
                bn(planes[r + 1] * 4),
                nn.ReLU(),
            )
            for r in range(len(widths) - 1)
        )
        self.final = nn.Sequential(
            nn.Conv2d(planes[-1] * 4, head_width, kernel_size=1, bias=True),
            bn(head_width),
        )

    def forward(self, xs):
        y = self.incre[0](xs[0])
        for r, down in enumerate(self.down):
            y = self.incre[r + 1](xs[r + 1]) + down(y)
        y = self.final(y)
        return torch.flatten(F.adaptive_avg_pool2d(y, 1), 1)


class MultiResolutionBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Sequential(
            conv3x3(cfg.in_channels, STEM_WIDTH, stride=2),
            bn(STEM_WIDTH),
            nn.ReLU(),
            conv3x3(STEM_WIDTH, STEM_WIDTH, stride=2),
            bn(STEM_WIDTH),
            nn.ReLU(),
        )
        self.layer1 = make_layer(Bottleneck, STEM_WIDTH, STEM_WIDTH, cfg.blocks_per_branch)
        prev = [STEM_WIDTH * Bottleneck.expansion]
        self.transitions = nn.ModuleList()
        self.stages = nn.ModuleList()
        for stage in range(2, cfg.num_stages + 1):
            widths = cfg.branch_widths(stage)
            self.transitions.append(Transition(prev, widths))
            self.stages.append(
                nn.Sequential(
                    *[MultiResolutionModule(widths, cfg.blocks_per_branch)
                      for _ in range(cfg.modules_per_stage[stage - 1])]
                )
            )
            prev = widths
        self.head = AugmentedHead(prev, cfg.head_width)
        if not cfg.train_batchnorm:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.requires_grad_(False)

    def stage_outputs(self, x: torch.Tensor) -> list[list[torch.Tensor]]:
        """Per-stage list of branch feature maps, highest resolution first."""
        self._check_input(x)
        xs = [self.layer1(self.stem(x))]
        outs = [xs]
        for trans, stage in zip(self.transitions, self.stages):
            xs = stage(trans(xs))
            outs.append(xs)
        return outs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stage_outputs(x)[-1])

    def _check_input(self, x):
        expected = (self.cfg.in_channels, *self.cfg.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected or x.shape[0] < 1:
            raise InvalidInputError(f"expected batch of shape (B>=1, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def train(self, mode: bool = True):
        super().train(mode)
        if mode and not self.cfg.train_batchnorm:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.eval()
        return self


def build_backbone(cfg: BackboneConfig, seed: int = 0, device=None) -> MultiResolutionBackbone:
    """Construct the backbone with a seeded initialization.

    Weights use Kaiming-normal for convolutions and unit/zero batch-norm
    affines, drawn from a private generator so the global RNG is untouched.
    Pass ``device="meta"`` to build a shape-only network for counting.
    """
    with torch.device(device or "cpu"):
        net = MultiResolutionBackbone(cfg)
    if device != "meta":
        init_weights(net, seed)
    return net


def init_weights(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Linear):
                bound = 1.0 / m.in_features**0.5
                m.weight.uniform_(-bound, bound, generator=g)
                m.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def forward(model: nn.Module, batch) -> torch.Tensor:
    """Run ``model`` on a list of Samples or a pre-stacked tensor."""
    if not isinstance(batch, torch.Tensor):
        if len(batch) == 0:
            raise InvalidInputError("batch must be non-empty")
        shapes = {s.pixels.shape for s in batch}
        if len(shapes) != 1:
            raise InvalidInputError(f"mixed pixel shapes in batch: {sorted(shapes)}")
        batch = torch.from_numpy(np.stack([s.pixels for s in batch]))
    return model(batch)

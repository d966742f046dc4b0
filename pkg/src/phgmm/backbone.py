"""Residual encoder producing a four-level feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    """Encoder layout. Stage widths are `depth_scale * (4, 8, 16, 32)`."""

    depth_scale: int = 8
    units: tuple[int, int, int, int] = (2, 2, 2, 2)
    stem_kernel: int = 7
    dilation: tuple[int, int, int, int] = (1, 1, 1, 1)

    @property
    def widths(self) -> tuple[int, int, int, int]:
        s = self.depth_scale
        return (4 * s, 8 * s, 16 * s, 32 * s)

    @property
    def stem_width(self) -> int:
        return self.depth_scale

    def validate(self, num_classes: int) -> None:
        if self.depth_scale < 1:
            raise ValueError("depth_scale must be >= 1")
        if min(self.units) < 1:
            raise ValueError("every stage needs at least one residual unit")
        if min(self.widths) < num_classes:
            raise ValueError(f"stage widths {self.widths} must be >= class count {num_classes}")


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor  # h/4
    f2: torch.Tensor  # h/8
    f3: torch.Tensor  # h/16
    f4: torch.Tensor  # h/32


def conv3x3(cin: int, cout: int, stride: int = 1, dilation: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=bias)


class ResidualUnit(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride, dilation)
        self.bn1 = nn.BatchNorm2d(cout, eps=BN_EPS)
        self.conv2 = conv3x3(cout, cout, 1, dilation)
        self.bn2 = nn.BatchNorm2d(cout, eps=BN_EPS)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm2d(cout, eps=BN_EPS),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(out + identity)


def residual_group(cin: int, cout: int, n: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    units = [ResidualUnit(cin, cout, stride, dilation)]
    units += [ResidualUnit(cout, cout, 1, dilation) for _ in range(n - 1)]
    return nn.Sequential(*units)


def check_divisible(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be divisible by 32")


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, in_channels: int = 3):
        super().__init__()
        self.config = config
        k = config.stem_kernel
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, config.stem_width, k, stride=2, padding=k // 2, bias=False),
            nn.BatchNorm2d(config.stem_width, eps=BN_EPS),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        widths = config.widths
        cins = (config.stem_width,) + widths[:3]
        strides = (1, 2, 2, 2)
        self.stages = nn.ModuleList(
            residual_group(cin, cout, n, stride, d)
            for cin, cout, n, stride, d in zip(cins, widths, config.units, strides, config.dilation)
        )

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        check_divisible(x.shape[-2], x.shape[-1])
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)

"""Decoding tower with additive encoder skips, and the multi-scale merger."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid, ShapeError, residual_group


class DecodedLevels(NamedTuple):
    g1: torch.Tensor  # h/32
    g2: torch.Tensor  # h/16
    g3: torch.Tensor  # h/8
    g4: torch.Tensor  # h/4


def upsample(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class Decoder(nn.Module):
    """Four residual groups of depth 3C, deepest level first.

    Before each group the matching encoder level goes through a 3x3 conv and
    a sigmoid and is added to the running map.
    """

    def __init__(self, fused_depth: int, encoder_widths, num_classes: int, units=(2, 2, 2, 2)):
        super().__init__()
        depth = 3 * num_classes
        self.depth = depth
        self.in_proj = nn.Conv2d(fused_depth, depth, 3, padding=1)
        # deepest encoder level first
        self.skips = nn.ModuleList(nn.Conv2d(w, depth, 3, padding=1) for w in reversed(encoder_widths))
        self.groups = nn.ModuleList(residual_group(depth, depth, n) for n in units)

    def forward(self, local_emb: torch.Tensor, pyramid: FeaturePyramid) -> DecodedLevels:
        if local_emb.shape[-2:] != pyramid.f4.shape[-2:]:
            raise ShapeError(
                f"local embedding {tuple(local_emb.shape[-2:])} does not match f4 {tuple(pyramid.f4.shape[-2:])}"
            )
        x = self.in_proj(local_emb)
        levels = []
        feats = tuple(reversed(pyramid))
        for i, (skip, group, f) in enumerate(zip(self.skips, self.groups, feats)):
            if i > 0:
                x = upsample(x, f.shape[-2:])
            x = group(x + torch.sigmoid(skip(f)))
            levels.append(x)
        return DecodedLevels(*levels)


class Merger(nn.Module):
    """Project each level to C, concatenate with the global map, 8x8 conv, x4 up, softmax.

    Returns log-probabilities; exponentiate for SegProbs.
    """

    def __init__(self, num_classes: int, global_depth: int | None):
        super().__init__()
        depth = 3 * num_classes
        self.level_convs = nn.ModuleList(nn.Conv2d(depth, num_classes, 3, padding=1) for _ in range(4))
        cin = 4 * num_classes + (global_depth or 0)
        self.head = nn.Conv2d(cin, num_classes, 8)

    def logits(self, levels: DecodedLevels, global_emb: torch.Tensor | None) -> torch.Tensor:
        size = levels.g4.shape[-2:]
        maps = [upsample(torch.relu(conv(g)), size) for conv, g in zip(self.level_convs, levels)]
        if global_emb is not None:
            if global_emb.shape[-2:] != size:
                raise ShapeError(f"global embedding {tuple(global_emb.shape[-2:])} != {tuple(size)}")
            maps.append(global_emb)
        # 'same' padding for an even kernel: 3 before, 4 after
        out = self.head(F.pad(torch.cat(maps, dim=1), (3, 4, 3, 4)))
        return F.interpolate(out, scale_factor=4, mode="bilinear", align_corners=False)

    def forward(self, levels: DecodedLevels, global_emb: torch.Tensor | None) -> torch.Tensor:
        return torch.log_softmax(self.logits(levels, global_emb), dim=1)

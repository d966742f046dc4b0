"""Distribution heads over the encoder pyramid and their decoder embeddings.

Tensors carry arbitrary leading batch dimensions: a mixture has means and
log-stds of shape (..., K, D) and logits of shape (..., K).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid

LOG_STD_MIN = -7.0
LOG_STD_MAX = 7.0


@dataclass(frozen=True)
class LatentConfig:
    num_components: int = 6
    latent_dim: int = 256
    global_dim: int = 256
    component_depth: int = 64
    global_depth: int = 64
    fused_depth: int = 512

    def validate(self) -> None:
        if self.num_components < 1:
            raise ValueError("need at least one mixture component")
        for name in ("latent_dim", "global_dim", "component_depth", "global_depth", "fused_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class MixtureParams:
    means: torch.Tensor
    log_stds: torch.Tensor
    logits: torch.Tensor

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @property
    def stds(self) -> torch.Tensor:
        return self.log_stds.exp()

    @property
    def num_components(self) -> int:
        return self.logits.shape[-1]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def __getitem__(self, idx) -> "MixtureParams":
        return MixtureParams(self.means[idx], self.log_stds[idx], self.logits[idx])

    def component(self, k: int) -> "GaussianParams":
        return GaussianParams(self.means[..., k, :], self.log_stds[..., k, :])

    def weighted_means(self) -> torch.Tensor:
        """pi^k * mu^k for every component, shape (..., K, D)."""
        return self.weights.unsqueeze(-1) * self.means

    def detach(self) -> "MixtureParams":
        return MixtureParams(self.means.detach(), self.log_stds.detach(), self.logits.detach())


@dataclass
class GaussianParams:
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def __getitem__(self, idx) -> "GaussianParams":
        return GaussianParams(self.mean[idx], self.log_std[idx])


def clamp_log_std(x: torch.Tensor) -> torch.Tensor:
    return x.clamp(LOG_STD_MIN, LOG_STD_MAX)


class PooledTrunk(nn.Module):
    """Per level: 3x3 conv to C channels, sigmoid, global average pool; concatenated to 4C."""

    def __init__(self, widths, num_classes: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(w, num_classes, 3, padding=1) for w in widths)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        pooled = [torch.sigmoid(conv(f)).mean(dim=(-2, -1)) for conv, f in zip(self.convs, pyramid)]
        return torch.cat(pooled, dim=-1)


class LocalSpace(nn.Module):
    """Mixture head q(z|x): K independent (mean, log-std) heads and one logits head."""

    def __init__(self, widths, num_classes: int, cfg: LatentConfig):
        super().__init__()
        self.cfg = cfg
        self.trunk = PooledTrunk(widths, num_classes)
        feat = 4 * num_classes
        self.component_heads = nn.ModuleList(
            nn.Linear(feat, 2 * cfg.latent_dim) for _ in range(cfg.num_components)
        )
        self.logits_head = nn.Linear(feat, cfg.num_components)
        # uniform mixture weights at initialisation
        nn.init.zeros_(self.logits_head.weight)
        nn.init.zeros_(self.logits_head.bias)

    def forward(self, pyramid: FeaturePyramid) -> MixtureParams:
        v = self.trunk(pyramid)
        stats = torch.stack([head(v) for head in self.component_heads], dim=-2)
        means, log_stds = stats.chunk(2, dim=-1)
        return MixtureParams(means, clamp_log_std(log_stds), self.logits_head(v))


class GlobalSpace(nn.Module):
    """Single-Gaussian head q(g|x) with its own trunk."""

    def __init__(self, widths, num_classes: int, cfg: LatentConfig):
        super().__init__()
        self.trunk = PooledTrunk(widths, num_classes)
        self.mean_head = nn.Linear(4 * num_classes, cfg.global_dim)
        self.log_std_head = nn.Linear(4 * num_classes, cfg.global_dim)

    def forward(self, pyramid: FeaturePyramid) -> GaussianParams:
        v = self.trunk(pyramid)
        return GaussianParams(self.mean_head(v), clamp_log_std(self.log_std_head(v)))


class LocalEmbedding(nn.Module):
    """Turn pi^k * mu^k into a fused (fused_depth, h/32, w/32) map."""

    def __init__(self, cfg: LatentConfig):
        super().__init__()
        self.cfg = cfg
        self.component_fc = nn.ModuleList(
            nn.Linear(cfg.latent_dim, cfg.component_depth) for _ in range(cfg.num_components)
        )
        self.fuse = nn.Conv2d(cfg.num_components * cfg.component_depth, cfg.fused_depth, 3, padding=1)

    def component_vectors(self, mp: MixtureParams) -> torch.Tensor:
        wm = mp.weighted_means()
        return torch.cat(
            [torch.relu(fc(wm[..., k, :])) for k, fc in enumerate(self.component_fc)], dim=-1
        )

    def forward(self, mp: MixtureParams, size: tuple[int, int]) -> torch.Tensor:
        v = self.component_vectors(mp)
        grid = v[..., :, None, None].expand(*v.shape, *size)
        return torch.relu(self.fuse(grid))


class GlobalEmbedding(nn.Module):
    """mu_g -> FC -> broadcast to h/32 -> bilinear x8 to h/4."""

    def __init__(self, cfg: LatentConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.global_dim, cfg.global_depth)

    def forward(self, gp: GaussianParams, size: tuple[int, int]) -> torch.Tensor:
        v = self.fc(gp.mean)
        grid = v[..., :, None, None].expand(*v.shape, *size)
        return F.interpolate(grid, scale_factor=8, mode="bilinear", align_corners=False)


def sample_mixture(mp: MixtureParams, n: int, seed: int) -> torch.Tensor:
    """Draw n samples from an unbatched mixture (means of shape (K, D))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    comp = torch.multinomial(mp.weights.detach(), n, replacement=True, generator=gen)
    eps = torch.randn((n, mp.dim), generator=gen, dtype=mp.means.dtype)
    return mp.means[comp] + mp.stds[comp] * eps


def mixture_log_prob(mp: MixtureParams, z: torch.Tensor) -> torch.Tensor:
    """log density of an unbatched diagonal mixture at points z of shape (n, D)."""
    diff = (z[:, None, :] - mp.means[None]) / mp.stds[None]
    comp = -0.5 * (diff**2).sum(-1) - mp.log_stds.sum(-1)[None] - 0.5 * mp.dim * math.log(2 * math.pi)
    return torch.logsumexp(mp.log_weights[None] + comp, dim=-1)

"""The full network: encoder, latent heads, decoder, merger and PostNet."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Backbone, BackboneConfig
from .data import IGNORE_INDEX
from .decoder import Decoder, Merger
from .latent import (
    GaussianParams,
    GlobalEmbedding,
    GlobalSpace,
    LatentConfig,
    LocalEmbedding,
    LocalSpace,
    MixtureParams,
)

PARAM_GROUPS = ("theta", "phi", "gamma")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 6
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    decoder_units: tuple[int, int, int, int] = (2, 2, 2, 2)
    use_global: bool = True

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.backbone.validate(self.num_classes)
        self.latent.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        bb = d.pop("backbone", {})
        lat = d.pop("latent", {})
        bb = {k: tuple(v) if isinstance(v, list) else v for k, v in bb.items()}
        if "decoder_units" in d:
            d["decoder_units"] = tuple(d["decoder_units"])
        return cls(backbone=BackboneConfig(**bb), latent=LatentConfig(**lat), **d)


@dataclass
class ModelOutput:
    log_probs: torch.Tensor  # (B, C, H, W)
    local: MixtureParams
    global_: GaussianParams | None

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def predict(self) -> torch.Tensor:
        return self.log_probs.argmax(dim=1)


def one_hot_mask(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, H, W) class indices -> (B, C, H, W) one-hot; ignore pixels map to all zeros."""
    valid = mask != IGNORE_INDEX
    if (mask[valid] >= num_classes).any() or (mask[valid] < 0).any():
        raise ValueError(f"mask has labels outside 0..{num_classes - 1}")
    safe = torch.where(valid, mask, torch.zeros_like(mask))
    oh = F.one_hot(safe, num_classes).permute(0, 3, 1, 2)
    return oh * valid[:, None]


class PostNet(nn.Module):
    """Posterior mixture p(z|x, y) from the image stacked with the one-hot labels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.num_classes = cfg.num_classes
        self.encoder = Backbone(cfg.backbone, in_channels=3 + cfg.num_classes)
        self.local_head = LocalSpace(cfg.backbone.widths, cfg.num_classes, cfg.latent)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> MixtureParams:
        oh = one_hot_mask(mask, self.num_classes).to(image.dtype)
        return self.local_head(self.encoder(torch.cat([image, oh], dim=1)))


class PHGMM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, lat, widths = cfg.num_classes, cfg.latent, cfg.backbone.widths
        # theta
        self.encoder = Backbone(cfg.backbone)
        self.local_head = LocalSpace(widths, C, lat)
        self.global_head = GlobalSpace(widths, C, lat) if cfg.use_global else None
        # phi
        self.local_embed = LocalEmbedding(lat)
        self.global_embed = GlobalEmbedding(lat) if cfg.use_global else None
        self.decoder = Decoder(lat.fused_depth, widths, C, cfg.decoder_units)
        self.merger = Merger(C, lat.global_depth if cfg.use_global else None)
        # gamma
        self.postnet = PostNet(cfg)

    def forward(self, image: torch.Tensor) -> ModelOutput:
        pyramid = self.encoder(image)
        q_z = self.local_head(pyramid)
        size = tuple(pyramid.f4.shape[-2:])
        levels = self.decoder(self.local_embed(q_z, size), pyramid)
        q_g = g_emb = None
        if self.global_head is not None:
            q_g = self.global_head(pyramid)
            g_emb = self.global_embed(q_g, size)
        return ModelOutput(self.merger(levels, g_emb), q_z, q_g)

    def posterior(self, image: torch.Tensor, mask: torch.Tensor) -> MixtureParams:
        return self.postnet(image, mask)

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        owner = {
            "encoder": "theta",
            "local_head": "theta",
            "global_head": "theta",
            "local_embed": "phi",
            "global_embed": "phi",
            "decoder": "phi",
            "merger": "phi",
            "postnet": "gamma",
        }
        groups: dict[str, list] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[owner[name.split(".", 1)[0]]].append((name, p))
        return groups

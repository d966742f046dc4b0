"""KL terms, segmentation loss and their weighted combination.

All KL functions reduce over the event dimension only, so batched
parameters give one value per batch element.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .data import IGNORE_INDEX
from .latent import GaussianParams, MixtureParams, mixture_log_prob, sample_mixture

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-8
IOU_EPS = 1e-6


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term} is not finite ({value})")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    g: float = 1.1
    z: float = 0.4
    s: float = 0.4

    def __post_init__(self):
        if min(self.g, self.z, self.s) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    l_g: torch.Tensor
    l_z: torch.Tensor
    l_s: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_g", "l_z", "l_s", "total")}


def kl_gaussian_standard(gp: GaussianParams) -> torch.Tensor:
    """KL(N(mu, sigma^2 I) || N(0, I))."""
    var = torch.exp(2 * gp.log_std)
    return (-gp.log_std + 0.5 * (var + gp.mean**2) - 0.5).sum(-1)


def kl_gaussian_pair(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    var_q = torch.exp(2 * q.log_std)
    var_p = torch.exp(2 * p.log_std)
    return (p.log_std - q.log_std + (var_q + (q.mean - p.mean) ** 2) / (2 * var_p) - 0.5).sum(-1)


def kl_mixture_matched(q: MixtureParams, p: MixtureParams) -> torch.Tensor:
    """Upper bound on KL(q || p) pairing component k of q with component k of p.

    sum_k pq^k [log(pq^k / pp^k) + KL(q_k || p_k)], with pp floored at 1e-8.
    """
    if q.num_components != p.num_components:
        raise ValueError(f"component count mismatch: {q.num_components} vs {p.num_components}")
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    log_wq = q.log_weights
    log_wp = p.log_weights.clamp(min=math.log(WEIGHT_FLOOR))
    comp = kl_gaussian_pair(GaussianParams(q.means, q.log_stds), GaussianParams(p.means, p.log_stds))
    return (log_wq.exp() * (log_wq - log_wp + comp)).sum(-1)


def kl_mixture_mc(q: MixtureParams, p: MixtureParams, n: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(q || p) and its standard error, for unbatched mixtures."""
    if n < 2:
        raise ValueError("need n >= 2 samples")
    with torch.no_grad():
        z = sample_mixture(q, n, seed)
        diff = mixture_log_prob(q, z) - mixture_log_prob(p, z)
        return float(diff.mean()), float(diff.std(unbiased=True) / math.sqrt(n))


def seg_loss(
    probs: torch.Tensor,
    mask: torch.Tensor,
    num_classes: int,
    log_probs: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-entropy plus (1 - soft IoU), averaged over the batch.

    probs is (B, C, H, W) or (C, H, W); mask holds class indices with
    IGNORE_INDEX for void pixels. Pass `log_probs` when available so the
    cross-entropy does not need log(probs). Soft IoU is averaged over the
    classes present in each ground truth.
    """
    if probs.dim() == 3:
        probs, mask = probs[None], mask[None]
        log_probs = None if log_probs is None else log_probs[None]
    if probs.shape[1] != num_classes or probs.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"probs {tuple(probs.shape)} incompatible with mask {tuple(mask.shape)}")
    valid = mask != IGNORE_INDEX
    if (mask[valid] >= num_classes).any() or (mask[valid] < 0).any():
        raise ValueError(f"mask has labels outside 0..{num_classes - 1}")
    target = torch.where(valid, mask, torch.zeros_like(mask))
    y = torch.nn.functional.one_hot(target, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    vm = valid[:, None].to(probs.dtype)
    y = y * vm

    if log_probs is None:
        log_probs = torch.log(probs.clamp_min(torch.finfo(probs.dtype).tiny))
    n_valid = vm.sum(dim=(1, 2, 3))
    nll = -(log_probs * y).sum(dim=(1, 2, 3))
    ce = torch.where(n_valid > 0, nll / n_valid.clamp_min(1), torch.zeros_like(nll))

    pv = probs * vm
    inter = (pv * y).sum(dim=(2, 3))
    union = (pv + y - pv * y).sum(dim=(2, 3))
    present = (y.sum(dim=(2, 3)) > 0).to(probs.dtype)
    n_present = present.sum(dim=1)
    iou = ((inter / (union + IOU_EPS)) * present).sum(dim=1) / n_present.clamp_min(1)
    if bool((n_valid == 0).any()):
        log.warning("seg_loss: %d sample(s) with no labelled pixels", int((n_valid == 0).sum()))
    return (ce + 1.0 - iou).mean()


def total_loss(l_g: torch.Tensor, l_z: torch.Tensor, l_s: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    for name, term in (("l_g", l_g), ("l_z", l_z), ("l_s", l_s)):
        if not torch.isfinite(torch.as_tensor(term)).all():
            raise TrainingDivergenceError(name, float(term.detach()))
    total = weights.g * l_g + weights.z * l_z + weights.s * l_s
    return LossBreakdown(l_g, l_z, l_s, total)

"""Training loop with per-group gradient routing, checkpoints and evaluation."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, Sample, augment, load_sample
from .latent import MixtureParams
from .losses import (
    LossBreakdown,
    LossWeights,
    TrainingDivergenceError,
    kl_gaussian_standard,
    kl_mixture_matched,
    seg_loss,
    total_loss,
)
from .metrics import ClassScores, ConfusionMatrix, LatentCloud, confusion, scores
from .model import PARAM_GROUPS, PHGMM, ModelConfig
from .backbone import BackboneConfig
from .latent import LatentConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_g", "l_z", "l_s", "total", "val_miou")

# which loss terms feed each parameter group's update
ROUTES = {
    "theta": ("g", "z", "s"),
    "phi": ("g", "s"),
    "gamma": ("g", "z"),
}


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None):
        super().__init__(f"{message}; last good checkpoint: {last_checkpoint or 'none'}")
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_interval: int = 10
    checkpoint_interval: int = 50
    snapshot_steps: tuple[int, ...] = (100, 1000, 10000, 100000)
    augment: bool = True
    float64: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        self.model.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        weights = LossWeights(**d.pop("weights", {}))
        for key in ("betas", "snapshot_steps"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(model=model, weights=weights, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def to_batch(samples: list[Sample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).long()
    return images.contiguous(), masks


def compute_losses(model: PHGMM, images: torch.Tensor, masks: torch.Tensor, weights: LossWeights):
    out = model(images)
    p_z = model.posterior(images, masks)
    l_z = kl_mixture_matched(out.local, p_z).mean()
    if out.global_ is not None:
        l_g = kl_gaussian_standard(out.global_).mean()
    else:
        l_g = images.new_zeros(())
    l_s = seg_loss(out.probs, masks, model.cfg.num_classes, log_probs=out.log_probs)
    return total_loss(l_g, l_z, l_s, weights), out


def routed_gradients(model: PHGMM, losses: LossBreakdown, weights: LossWeights) -> dict[str, torch.Tensor]:
    """Gradient per parameter name, each group receiving only its routed terms."""
    groups = model.param_groups()
    named = [(n, p) for g in PARAM_GROUPS for n, p in groups[g]]
    params = [p for _, p in named]
    terms = {"g": weights.g * losses.l_g, "z": weights.z * losses.l_z, "s": weights.s * losses.l_s}
    per_term: dict[str, tuple] = {}
    live = [t for t, v in terms.items() if v.requires_grad]
    for i, t in enumerate(live):
        per_term[t] = torch.autograd.grad(
            terms[t], params, allow_unused=True, retain_graph=i < len(live) - 1
        )
    out = {}
    idx = 0
    for g in PARAM_GROUPS:
        for name, p in groups[g]:
            total = torch.zeros_like(p)
            for t in ROUTES[g]:
                if t in per_term and per_term[t][idx] is not None:
                    total = total + per_term[t][idx]
            out[name] = total
            idx += 1
    return out


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _sample_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class Trainer:
    def __init__(self, cfg: TrainConfig, manifest: DatasetManifest | None = None):
        cfg.validate()
        if manifest is not None and manifest.num_classes != cfg.model.num_classes:
            raise ValueError(
                f"manifest has {manifest.num_classes} classes but model expects {cfg.model.num_classes}"
            )
        self.cfg = cfg
        self.manifest = manifest
        self.dtype = torch.float64 if cfg.float64 else torch.float32
        seed_everything(cfg.seed)
        self.model = PHGMM(cfg.model).to(self.dtype)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=cfg.betas)
        self.epoch = 0
        self.step_count = 0
        self._train: list[Sample] | None = None
        self.snapshot_steps: frozenset[int] = frozenset()
        self.snapshot_dir: Path | None = None

    # data ----------------------------------------------------------------
    def train_samples(self) -> list[Sample]:
        if self._train is None:
            if self.manifest is None:
                raise ValueError("trainer has no manifest")
            self._train = [load_sample(self.manifest, i) for i in self.manifest.ids("train")]
        return self._train

    def epoch_batches(self, epoch: int):
        samples = self.train_samples()
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(samples))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            chunk = order[start : start + bs]
            batch = []
            for pos, i in enumerate(chunk):
                s = samples[i]
                if self.cfg.augment:
                    s = augment(s, _sample_seed(self.cfg.seed, epoch, start + pos))
                batch.append(s)
            yield to_batch(batch, self.dtype)

    # optimisation ----------------------------------------------------------
    def step(self, images: torch.Tensor, masks: torch.Tensor) -> dict[str, float]:
        self.model.train()
        losses, _ = compute_losses(self.model, images, masks, self.cfg.weights)
        grads = routed_gradients(self.model, losses, self.cfg.weights)
        for name, p in self.model.named_parameters():
            p.grad = grads[name]
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.step_count += 1
        return losses.as_floats()

    def train_epoch(self) -> dict[str, float]:
        """One pass over the training split; returns batch-averaged loss terms."""
        epoch = self.epoch + 1
        totals = {k: 0.0 for k in ("l_g", "l_z", "l_s", "total")}
        n = 0
        for images, masks in self.epoch_batches(epoch):
            for k, v in self.step(images, masks).items():
                totals[k] += v
            n += 1
            if self.snapshot_dir is not None and self.step_count in self.snapshot_steps:
                self.save(self.snapshot_dir / f"step_{self.step_count:07d}.pt")
        self.epoch = epoch
        return {k: v / max(n, 1) for k, v in totals.items()}

    # persistence ----------------------------------------------------------
    def state(self) -> dict:
        meta = {
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.digest(),
            "epoch": self.epoch,
            "step": self.step_count,
        }
        return {
            "meta": json.dumps(meta, sort_keys=True),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": torch.get_rng_state(),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state(), path)
        return path

    @classmethod
    def load(cls, path: str | Path, manifest: DatasetManifest | None = None) -> "Trainer":
        ckpt = read_checkpoint(path)
        meta = json.loads(ckpt["meta"])
        trainer = cls(TrainConfig.from_dict(meta["config"]), manifest)
        trainer.model.load_state_dict(ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        torch.set_rng_state(ckpt["rng"])
        trainer.epoch = meta["epoch"]
        trainer.step_count = meta["step"]
        return trainer

    # full run ---------------------------------------------------------------
    def fit(self, out_dir: str | Path) -> Path:
        """Train for cfg.epochs epochs, writing train_log.csv, checkpoints and snapshots."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt_dir = out / "checkpoints"
        n_train = len(self.train_samples())
        steps_per_epoch = math.ceil(n_train / self.cfg.batch_size)
        total_steps = steps_per_epoch * self.cfg.epochs
        self.snapshot_steps = frozenset(
            min(s, total_steps) for s in self.cfg.snapshot_steps if total_steps > 0
        )
        self.snapshot_dir = out / "snapshots"
        has_val = bool(self.manifest.splits.get("val"))

        last_good = self.save(ckpt_dir / "epoch_0000.pt")
        log_path = out / "train_log.csv"
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            fh.flush()
            while self.epoch < self.cfg.epochs:
                try:
                    row = self.train_epoch()
                except TrainingDivergenceError as exc:
                    raise TrainingAborted(str(exc), last_good) from exc
                miou = ""
                last = self.epoch == self.cfg.epochs
                if has_val and self.cfg.eval_interval > 0 and (self.epoch % self.cfg.eval_interval == 0 or last):
                    report = evaluate(self.model, self.manifest, "val", widths=())
                    miou = repr(report.scores.mean_iou)
                writer.writerow([self.epoch] + [repr(row[k]) for k in LOG_COLUMNS[1:5]] + [miou])
                fh.flush()
                log.info("epoch %d total %.5f val_miou %s", self.epoch, row["total"], miou or "-")
                if self.cfg.checkpoint_interval > 0 and self.epoch % self.cfg.checkpoint_interval == 0:
                    last_good = self.save(ckpt_dir / f"epoch_{self.epoch:04d}.pt")
        return self.save(ckpt_dir / "last.pt")


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def load_model(path: str | Path) -> tuple[PHGMM, dict]:
    """Rebuild the network from a checkpoint, in eval mode; returns (model, metadata)."""
    ckpt = read_checkpoint(path)
    meta = json.loads(ckpt["meta"])
    cfg = TrainConfig.from_dict(meta["config"])
    model = PHGMM(cfg.model)
    if cfg.float64:
        model = model.double()
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, meta


# evaluation ------------------------------------------------------------------


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    scores: ClassScores
    trimap: list[tuple[int, float]]


def trimap_accumulate(pred: np.ndarray, gt: np.ndarray, widths, wrong: np.ndarray, total: np.ndarray) -> None:
    from scipy.ndimage import distance_transform_edt

    from .data import IGNORE_INDEX
    from .metrics import boundary

    b = boundary(gt)
    if not b.any():
        return
    dist = distance_transform_edt(~b)
    labelled = gt != IGNORE_INDEX
    miss = (pred != gt) & labelled
    for j, w in enumerate(widths):
        band = (dist < w) & labelled
        wrong[j] += int(miss[band].sum())
        total[j] += int(band.sum())


@torch.no_grad()
def predict(model: PHGMM, samples: list[Sample], batch_size: int = 16) -> list[np.ndarray]:
    model.eval()
    dtype = next(model.parameters()).dtype
    preds = []
    for start in range(0, len(samples), batch_size):
        images, _ = to_batch(samples[start : start + batch_size], dtype)
        preds.extend(model(images).predict().numpy())
    return preds


def evaluate(
    model: PHGMM,
    manifest: DatasetManifest,
    split: str,
    widths=tuple(range(1, 31)),
    predictions: list[np.ndarray] | None = None,
) -> EvalReport:
    """Scores and trimap curve over a split; pass `predictions` to score masks directly."""
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    samples = [load_sample(manifest, i) for i in ids]
    was_training = model.training if model is not None else False
    if predictions is None:
        predictions = predict(model, samples)
    C = manifest.num_classes
    cm = ConfusionMatrix.empty(C)
    widths = tuple(widths)
    wrong = np.zeros(len(widths), dtype=np.int64)
    total = np.zeros(len(widths), dtype=np.int64)
    for s, pred in zip(samples, predictions):
        cm = cm + confusion(pred, s.mask, C)
        if widths:
            trimap_accumulate(pred, s.mask, widths, wrong, total)
    if model is not None and was_training:
        model.train()
    curve = [(w, float(wr / t) if t else 0.0) for w, wr, t in zip(widths, wrong, total)]
    return EvalReport(cm, scores(cm), curve)


@torch.no_grad()
def collect_latents(model: PHGMM, manifest: DatasetManifest, split: str, iteration: int = 0) -> LatentCloud:
    """pi^k * mu^k for every image and component, labelled by component index."""
    model.eval()
    samples = [load_sample(manifest, i) for i in manifest.ids(split)]
    dtype = next(model.parameters()).dtype
    points = []
    for start in range(0, len(samples), 16):
        images, _ = to_batch(samples[start : start + 16], dtype)
        q: MixtureParams = model.local_head(model.encoder(images))
        points.append(q.weighted_means().reshape(-1, q.dim).numpy())
    K = model.cfg.latent.num_components
    pts = np.concatenate(points) if points else np.zeros((0, model.cfg.latent.latent_dim))
    labels = np.tile(np.arange(K), len(samples))
    return LatentCloud(pts.astype(np.float64), labels, iteration)


# gradient check -----------------------------------------------------------------


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        num_classes=3,
        backbone=BackboneConfig(depth_scale=4, units=(1, 1, 1, 1)),
        latent=LatentConfig(
            num_components=2, latent_dim=8, global_dim=8, component_depth=4, global_depth=4, fused_depth=8
        ),
        decoder_units=(1, 1, 1, 1),
    )


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    max_abs_analytic: dict[str, float]
    tolerance: float

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.max_rel_error.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing

    def lines(self) -> list[str]:
        out = []
        for g in self.max_rel_error:
            status = "ok" if g not in self.failing else "FAIL"
            out.append(
                f"{g:6s} params={self.checked[g]:4d} max_rel_err={self.max_rel_error[g]:.3e} "
                f"max|grad|={self.max_abs_analytic[g]:.3e} {status}"
            )
        return out


def gradcheck(
    cfg: ModelConfig | None = None,
    seed: int = 0,
    weights: LossWeights = LossWeights(),
    n_params: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    size: int = 32,
    batch: int = 4,
    floor: float = 1e-6,
    grad_transform=None,
) -> GradcheckReport:
    """Compare routed analytic gradients with central differences in float64.

    Relative error is |a - n| / max(|a|, |n|, floor). `grad_transform`, if
    given, maps (name, grad) -> grad before comparison; tests use it to
    corrupt one group on purpose.

    At 32x32 the deepest level is 1x1, so train-mode batch norm there
    normalises over `batch` values only. With two values it acts as a near
    step function and central differences lose accuracy; 4 is enough.
    """
    cfg = cfg or tiny_model_config()
    seed_everything(seed)
    model = PHGMM(cfg).double().train()
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand((batch, 3, size, size), generator=gen, dtype=torch.float64)
    masks = torch.randint(0, cfg.num_classes, (batch, size, size), generator=gen)
    masks[:, :2, :2] = 255

    losses, _ = compute_losses(model, images, masks, weights)
    grads = routed_gradients(model, losses, weights)
    if grad_transform is not None:
        grads = {n: grad_transform(n, g) for n, g in grads.items()}

    def objective(group: str) -> float:
        with torch.no_grad():
            lb, _ = compute_losses(model, images, masks, weights)
        terms = {"g": weights.g * lb.l_g, "z": weights.z * lb.l_z, "s": weights.s * lb.l_s}
        return float(sum(terms[t] for t in ROUTES[group]))

    rng = np.random.default_rng(seed)
    rel: dict[str, float] = {}
    checked: dict[str, int] = {}
    amax: dict[str, float] = {}
    for group, named in model.param_groups().items():
        flat = [(n, p, j) for n, p in named for j in range(p.numel())]
        pick = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)
        worst = 0.0
        biggest = 0.0
        for idx in pick:
            name, p, j = flat[idx]
            view = p.data.view(-1)
            orig = view[j].item()
            view[j] = orig + step
            fp = objective(group)
            view[j] = orig - step
            fm = objective(group)
            view[j] = orig
            num = (fp - fm) / (2 * step)
            ana = grads[name].reshape(-1)[j].item()
            denom = max(abs(ana), abs(num), floor)
            worst = max(worst, abs(ana - num) / denom)
            biggest = max(biggest, abs(ana))
        rel[group] = worst
        checked[group] = len(pick)
        amax[group] = biggest
    return GradcheckReport(rel, checked, amax, tolerance)

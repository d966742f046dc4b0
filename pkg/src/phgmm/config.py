"""Run configuration: a TOML file of flat keys, overridable from the command line.

Scene families may be given as an array of tables (``[[families]]``); every
other key is a scalar or a list. Unknown keys are rejected so that a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .backbone import BackboneConfig
from .data import ConfigurationError, SceneSpec
from .latent import LatentConfig
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # scene generation
    height: int = 64
    width: int = 64
    noise: float = 0.05
    min_contrast: float = 0.25
    scene_seed: int = 0
    families: tuple[dict, ...] | None = None
    n_train: int = 64
    n_val: int = 32
    # locations
    data_root: str | None = None
    manifest: str | None = None
    checkpoint: str | None = None
    out: str = "runs/default"
    # model
    depth_scale: int = 8
    units: tuple[int, ...] = (2, 2, 2, 2)
    dilation: tuple[int, ...] = (1, 1, 1, 1)
    num_components: int | None = None  # None means K = C
    latent_dim: int = 256
    global_dim: int = 256
    component_depth: int = 64
    global_depth: int = 64
    fused_depth: int = 512
    decoder_units: tuple[int, ...] = (2, 2, 2, 2)
    use_global: bool | tuple[bool, ...] = True
    # training
    seed: int = 0
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    lambda_g: float = 1.1
    lambda_z: float = 0.4
    lambda_s: float = 0.4
    eval_interval: int = 10
    checkpoint_interval: int = 50
    snapshot_steps: tuple[int, ...] = (100, 1000, 10000, 100000)
    augment: bool = True
    float64: bool = False
    # ablation sweep
    k_values: tuple[Any, ...] | None = None
    seeds: tuple[int, ...] | None = None
    # evaluation
    split: str = "val"
    widths: tuple[int, ...] = tuple(range(1, 31))

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - cls.keys())
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
        clean = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(v)
            clean[k] = v
        cfg = cls(**clean)
        g = cfg.use_global
        if not (isinstance(g, bool) or (isinstance(g, tuple) and g and all(isinstance(x, bool) for x in g))):
            raise ConfigurationError(f"use_global must be a boolean or a list of booleans, got {g!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise FileNotFoundError(f"config file not found: {path}")
            try:
                data = tomllib.loads(path.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigurationError(f"config must be flat; found table(s): {', '.join(nested)}")
        data.update(overrides or {})
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_resolved(self, directory: str | Path) -> Path:
        path = Path(directory) / "resolved_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    # ------------------------------------------------------------------
    def scene(self) -> SceneSpec:
        d = {
            "height": self.height,
            "width": self.width,
            "noise": self.noise,
            "seed": self.scene_seed,
            "min_contrast": self.min_contrast,
        }
        if self.families is not None:
            d["families"] = list(self.families)
        try:
            spec = SceneSpec.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"bad families entry: {exc}") from exc
        spec.validate()
        return spec

    def dataset_root(self) -> Path:
        return Path(self.data_root) if self.data_root else Path(self.out) / "data"

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.dataset_root() / "manifest.json"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoints" / "last.pt"

    def resolve_k(self, value: Any, num_classes: int) -> int:
        """Accept an int or an expression in C such as "C" or "2C"."""
        if isinstance(value, bool):
            raise ConfigurationError(f"bad K value {value!r}")
        if isinstance(value, int):
            return value
        text = str(value).strip().replace(" ", "")
        if text.endswith("C"):
            coef = text[:-1] or "1"
            if coef.isdigit():
                return int(coef) * num_classes
        raise ConfigurationError(f"bad K value {value!r}; use an integer, 'C' or '<n>C'")

    def model_config(self, num_classes: int, k: int | None = None, use_global: bool | None = None) -> ModelConfig:
        if k is None:
            k = num_classes if self.num_components is None else self.resolve_k(self.num_components, num_classes)
        if use_global is None:
            use_global = self.use_global if isinstance(self.use_global, bool) else self.use_global[0]
        return ModelConfig(
            num_classes=num_classes,
            backbone=BackboneConfig(
                depth_scale=self.depth_scale, units=tuple(self.units), dilation=tuple(self.dilation)
            ),
            latent=LatentConfig(
                num_components=k,
                latent_dim=self.latent_dim,
                global_dim=self.global_dim,
                component_depth=self.component_depth,
                global_depth=self.global_depth,
                fused_depth=self.fused_depth,
            ),
            decoder_units=tuple(self.decoder_units),
            use_global=bool(use_global),
        )

    def train_config(self, model: ModelConfig, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            model=model,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            betas=tuple(self.betas),
            seed=self.seed if seed is None else seed,
            weights=LossWeights(self.lambda_g, self.lambda_z, self.lambda_s),
            eval_interval=self.eval_interval,
            checkpoint_interval=self.checkpoint_interval,
            snapshot_steps=tuple(self.snapshot_steps),
            augment=self.augment,
            float64=self.float64,
        )

    def sweep(self, num_classes: int) -> list[tuple[str, TrainConfig]]:
        """One (run name, TrainConfig) per point of the K x use_global x seed grid.

        With no `k_values`, `seeds` or list-valued `use_global` this is a single
        unnamed run.
        """
        globals_ = self.use_global if isinstance(self.use_global, tuple) else (self.use_global,)
        if self.k_values is None and self.seeds is None and len(globals_) == 1:
            return [("", self.train_config(self.model_config(num_classes)))]
        ks = self.k_values if self.k_values is not None else (self.num_components or num_classes,)
        seeds = self.seeds if self.seeds is not None else (self.seed,)
        runs = []
        for kv in ks:
            k = self.resolve_k(kv, num_classes)
            for g in globals_:
                for s in seeds:
                    name = f"K{k}_{'zg' if g else 'z'}_seed{s}"
                    runs.append((name, self.train_config(self.model_config(num_classes, k, g), seed=s)))
        return runs


def parse_override(text: str) -> tuple[str, Any]:
    """`key=value` with the value read as a TOML value; bare words stay strings."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    if isinstance(value, list):
        value = tuple(value)
    return key, value


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    return replace(cfg, **kw) if kw else cfg

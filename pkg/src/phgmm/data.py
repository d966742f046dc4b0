"""Synthetic scene generation, dataset files and augmentation.

Scenes are drawn on a flat textured background; every foreground class has
its own shape family and colours are drawn per shape, so class identity is
carried by geometry rather than by colour.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_INDEX = 255

SHAPE_KINDS = ("rectangle", "vbar", "disk", "square", "triangle")

DEFAULT_CLASS_NAMES = ("background", "rectangle", "bar", "disk", "square", "triangle")

DEFAULT_PALETTE = (
    (0, 0, 0),
    (128, 64, 128),
    (220, 220, 0),
    (0, 0, 142),
    (220, 20, 60),
    (107, 142, 35),
)


class ConfigurationError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


class CorruptDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class ShapeFamily:
    """How one foreground class is drawn.

    `size` is the shape extent in pixels (side for rectangles and squares,
    radius for disks, bar width for vertical bars); `count` is the inclusive
    range for the number of shapes per scene.
    """

    kind: str
    count: tuple[int, int]
    size: tuple[int, int]
    length: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"unknown shape kind {self.kind!r}")
        if not (0 <= self.count[0] <= self.count[1]):
            raise ConfigurationError(f"bad count range {self.count}")
        if not (1 <= self.size[0] <= self.size[1]):
            raise ConfigurationError(f"bad size range {self.size}")


def default_families() -> tuple[ShapeFamily, ...]:
    return (
        ShapeFamily("rectangle", count=(1, 1), size=(16, 32)),
        ShapeFamily("vbar", count=(1, 1), size=(6, 8), length=(28, 56)),
        ShapeFamily("disk", count=(1, 1), size=(8, 12)),
        ShapeFamily("square", count=(1, 1), size=(10, 14)),
        ShapeFamily("triangle", count=(1, 1), size=(18, 26)),
    )


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    families: tuple[ShapeFamily, ...] = field(default_factory=default_families)
    noise: float = 0.05
    seed: int = 0
    min_contrast: float = 0.25

    @property
    def num_classes(self) -> int:
        return len(self.families) + 1

    def validate(self) -> None:
        if self.height <= 0 or self.width <= 0 or self.height % 32 or self.width % 32:
            raise ConfigurationError(
                f"canvas {self.height}x{self.width} must be a positive multiple of 32"
            )
        if self.num_classes < 2:
            raise ConfigurationError("need at least one foreground family")
        if self.noise < 0:
            raise ConfigurationError("noise amplitude must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "noise": self.noise,
            "seed": self.seed,
            "min_contrast": self.min_contrast,
            "families": [
                {"kind": f.kind, "count": list(f.count), "size": list(f.size), "length": list(f.length)}
                for f in self.families
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        fams = d.pop("families", None)
        if fams is not None:
            d["families"] = tuple(
                ShapeFamily(
                    f["kind"],
                    tuple(f["count"]),
                    tuple(f["size"]),
                    tuple(f.get("length", (0, 0))),
                )
                for f in fams
            )
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (h, w, 3) float32 in [0, 1]
    mask: np.ndarray  # (h, w) int64, IGNORE_INDEX for void
    id: str = ""

    def validate(self, num_classes: int | None = None) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise CorruptDatasetError(f"{self.id}: image must be h x w x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise CorruptDatasetError(
                f"{self.id}: mask {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        h, w = self.mask.shape
        if h % 32 or w % 32:
            raise CorruptDatasetError(f"{self.id}: size {h}x{w} not divisible by 32")
        if num_classes is not None:
            bad = (self.mask >= num_classes) & (self.mask != IGNORE_INDEX)
            if bad.any():
                raise CorruptDatasetError(
                    f"{self.id}: mask value {int(self.mask[bad][0])} outside 0..{num_classes - 1}"
                )


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    palette: list[tuple[int, int, int]]
    splits: dict[str, list[str]]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def ids(self, split: str) -> list[str]:
        try:
            return self.splits[split]
        except KeyError:
            raise DatasetError(f"split {split!r} not in manifest ({sorted(self.splits)})") from None

    def image_path(self, split: str, sample_id: str) -> Path:
        return self.root / split / "img" / f"{sample_id}.png"

    def mask_path(self, split: str, sample_id: str) -> Path:
        return self.root / split / "mask" / f"{sample_id}.png"

    def split_of(self, sample_id: str) -> str:
        for name, ids in self.splits.items():
            if sample_id in ids:
                return name
        raise DatasetError(f"id {sample_id!r} not in manifest")

    def to_json(self) -> str:
        doc = {
            "classes": self.classes,
            "palette": [list(c) for c in self.palette],
            "splits": self.splits,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CorruptDatasetError(f"{path}: {exc}") from None
        for key in ("classes", "palette", "splits"):
            if key not in doc:
                raise CorruptDatasetError(f"{path}: missing key {key!r}")
        if len(doc["classes"]) < 2:
            raise CorruptDatasetError(f"{path}: need at least 2 classes")
        return cls(
            root=path.parent,
            classes=list(doc["classes"]),
            palette=[tuple(c) for c in doc["palette"]],
            splits={k: list(v) for k, v in doc["splits"].items()},
        )


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _pick_color(rng: np.random.Generator, background: np.ndarray, min_contrast: float) -> np.ndarray:
    for _ in range(64):
        c = rng.uniform(0.0, 1.0, size=3)
        if np.abs(c - background).max() >= min_contrast:
            return c
    return 1.0 - background


def _shape_mask(kind: str, fam: ShapeFamily, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    size = int(rng.integers(fam.size[0], fam.size[1] + 1))
    if kind in ("rectangle", "square"):
        if kind == "rectangle":
            sh = min(size, h)
            sw = min(int(rng.integers(fam.size[0], fam.size[1] + 1)), w)
        else:
            sh = sw = min(size, h, w)
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        return (yy >= y0) & (yy < y0 + sh) & (xx >= x0) & (xx < x0 + sw)
    if kind == "vbar":
        lo, hi = fam.length if fam.length[1] > 0 else (h // 2, h)
        bh = min(int(rng.integers(lo, hi + 1)), h)
        bw = min(size, w)
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        return (yy >= y0) & (yy < y0 + bh) & (xx >= x0) & (xx < x0 + bw)
    if kind == "disk":
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        return (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= size**2
    # upward isosceles triangle with apex at the top
    size = min(size, h, w)
    y0 = int(rng.integers(0, h - size + 1))
    xc = rng.uniform(size / 2, w - size / 2)
    rel = (yy + 0.5 - y0) / size
    return (rel >= 0) & (rel <= 1) & (np.abs(xx + 0.5 - xc) <= rel * size / 2)


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Render scene number `index`; a pure function of (spec, index)."""
    spec.validate()
    if index < 0:
        raise ConfigurationError("scene index must be nonnegative")
    h, w = spec.height, spec.width
    rng = np.random.default_rng([spec.seed, index])

    background = rng.uniform(0.0, 1.0, size=3)
    image = np.broadcast_to(background, (h, w, 3)).copy()
    mask = np.zeros((h, w), dtype=np.int64)

    shapes = []
    for cls, fam in enumerate(spec.families, start=1):
        n = int(rng.integers(fam.count[0], fam.count[1] + 1))
        shapes.extend([(cls, fam)] * n)
    order = rng.permutation(len(shapes))
    for i in order:
        cls, fam = shapes[i]
        region = _shape_mask(fam.kind, fam, rng, h, w)
        color = _pick_color(rng, background, spec.min_contrast)
        image[region] = color
        mask[region] = cls

    if spec.noise > 0:
        image = image + rng.uniform(-spec.noise, spec.noise, size=image.shape)
    return Sample(image=_quantize(image), mask=mask, id=f"scene_{index:05d}")


def _save_png(array: np.ndarray, path: Path) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path, format="PNG", compress_level=6)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc


def save_mask(mask: np.ndarray, path: Path) -> None:
    _save_png(mask.astype(np.uint8), Path(path))


def save_image(image: np.ndarray, path: Path) -> None:
    _save_png((np.round(np.clip(image, 0, 1) * 255)).astype(np.uint8), Path(path))


def colorize(mask: np.ndarray, palette) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.uint8)
    lut[IGNORE_INDEX] = (255, 255, 255)
    for c, rgb in enumerate(palette):
        lut[c] = rgb
    return lut[mask.astype(np.uint8)]


def _class_meta(num_classes: int) -> tuple[list[str], list[tuple[int, int, int]]]:
    names = list(DEFAULT_CLASS_NAMES[:num_classes])
    names += [f"class_{i}" for i in range(len(names), num_classes)]
    palette = list(DEFAULT_PALETTE[:num_classes])
    rng = np.random.default_rng(num_classes)
    while len(palette) < num_classes:
        palette.append(tuple(int(v) for v in rng.integers(0, 256, size=3)))
    return names, palette


def generate_dataset(spec: SceneSpec, n_train: int, n_val: int, root: str | os.PathLike) -> DatasetManifest:
    """Write `n_train + n_val` scenes under `root` plus `manifest.json`."""
    spec.validate()
    if n_train < 0 or n_val < 0:
        raise ConfigurationError("split sizes must be nonnegative")
    root = Path(root)
    names, palette = _class_meta(spec.num_classes)
    splits: dict[str, list[str]] = {"train": [], "val": []}

    index = 0
    for split, n in (("train", n_train), ("val", n_val)):
        for _ in range(n):
            sample = generate_scene(spec, index)
            sid = f"{split}_{index:05d}"
            save_image(sample.image, root / split / "img" / f"{sid}.png")
            save_mask(sample.mask, root / split / "mask" / f"{sid}.png")
            splits[split].append(sid)
            index += 1

    manifest = DatasetManifest(root=root, classes=names, palette=palette, splits=splits)
    path = root / "manifest.json"
    try:
        root.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.to_json(), encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return manifest


def load_sample(manifest: DatasetManifest, sample_id: str) -> Sample:
    split = manifest.split_of(sample_id)
    img_path = manifest.image_path(split, sample_id)
    mask_path = manifest.mask_path(split, sample_id)
    try:
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        with Image.open(mask_path) as im:
            if im.mode not in ("L", "P"):
                raise CorruptDatasetError(f"{mask_path}: mask must be single-channel, got {im.mode}")
            mask = np.asarray(im, dtype=np.int64)
    except FileNotFoundError as exc:
        raise DatasetError(f"missing file for {sample_id}: {exc.filename}") from None
    sample = Sample(image=image, mask=mask, id=sample_id)
    sample.validate(manifest.num_classes)
    return sample


def augment_params(seed: int) -> dict:
    """Draw the augmentation decisions for `seed`.

    Returns a dict with keys flip (bool), brightness (offset or None) and
    contrast (scale or None).
    """
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=3)
    brightness = float(rng.uniform(-0.2, 0.2))
    contrast = float(rng.uniform(0.8, 1.2))
    return {
        "flip": bool(u[0] < 0.5),
        "brightness": brightness if u[1] < 0.5 else None,
        "contrast": contrast if u[2] < 0.5 else None,
    }


def augment(sample: Sample, seed: int) -> Sample:
    p = augment_params(seed)
    image, mask = sample.image, sample.mask
    if p["flip"]:
        image = image[:, ::-1]
        mask = mask[:, ::-1]
    if p["brightness"] is not None or p["contrast"] is not None:
        image = image.astype(np.float32, copy=True)
        if p["brightness"] is not None:
            image = image + np.float32(p["brightness"])
        if p["contrast"] is not None:
            mean = image.mean()
            image = (image - mean) * np.float32(p["contrast"]) + mean
        image = np.clip(image, 0.0, 1.0)
    return Sample(image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask), id=sample.id)

"""Figures rendered from the CSV files the CLI writes, never from live objects."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import LatentCloud, project_2d  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _rows(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_trimap(csv_path: str | Path, png_path: str | Path) -> Path:
    rows = _rows(csv_path)
    w = [int(r["width"]) for r in rows]
    e = [100.0 * float(r["error"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(w, e, marker="o", ms=3)
    ax.set_xlabel("trimap width (px)")
    ax.set_ylabel("misclassified pixels (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, png_path)


def plot_training(csv_path: str | Path, png_path: str | Path) -> Path:
    rows = _rows(csv_path)
    epoch = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("l_g", "l_z", "l_s", "total"):
        ax.plot(epoch, [float(r[key]) for r in rows], label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.legend()
    miou = [(int(r["epoch"]), float(r["val_miou"])) for r in rows if r["val_miou"]]
    if miou:
        ax2 = ax.twinx()
        ax2.plot(*zip(*miou), "k--", marker=".", label="val mIoU")
        ax2.set_ylabel("val mIoU")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, png_path)


def read_cloud(csv_path: str | Path) -> LatentCloud:
    rows = _rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: empty latent cloud")
    dims = sorted((k for k in rows[0] if k.startswith("z")), key=lambda k: int(k[1:]))
    points = np.array([[float(r[k]) for k in dims] for r in rows])
    labels = np.array([int(r["label"]) for r in rows])
    return LatentCloud(points, labels, int(rows[0]["iteration"]))


def plot_latent(cloud_csvs: list[str | Path], png_path: str | Path) -> Path:
    """One PCA panel per snapshot, points coloured by component index."""
    n = len(cloud_csvs)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    for ax, path in zip(axes[0], cloud_csvs):
        cloud = read_cloud(path)
        xy = project_2d(cloud)
        sc = ax.scatter(xy[:, 0], xy[:, 1], c=cloud.labels, cmap="tab10", s=6, vmin=0, vmax=9)
        ax.set_title(f"iteration {cloud.iteration}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(sc, ax=axes[0].tolist(), label="component")
    return _save(fig, png_path)


def plot_ablation(csv_path: str | Path, png_path: str | Path) -> Path:
    """Mean val mIoU per (K, latent set) with one-sd error bars over seeds."""
    rows = _rows(csv_path)
    groups: dict[tuple[int, str], list[float]] = {}
    for r in rows:
        groups.setdefault((int(r["k"]), r["latents"]), []).append(float(r["val_miou"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for latents in sorted({g for _, g in groups}):
        ks = sorted(k for k, g in groups if g == latents)
        means = [np.mean(groups[k, latents]) for k in ks]
        sds = [np.std(groups[k, latents]) for k in ks]
        ax.errorbar(ks, means, yerr=sds, marker="o", capsize=3, label=latents)
    ax.set_xlabel("mixture components K")
    ax.set_ylabel("val mIoU")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, png_path)

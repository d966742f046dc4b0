"""Segmentation scores, boundary trimap error and latent cluster diagnostics."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial.distance import cdist

from .data import IGNORE_INDEX

log = logging.getLogger(__name__)

TRIMAP_WIDTHS = (1, 5, 10, 15, 20, 25, 30)


class UndefinedScoreError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) rows = ground truth, cols = prediction
    ignored: int = 0

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)


@dataclass
class ClassScores:
    iou: np.ndarray  # nan where undefined
    precision: np.ndarray
    recall: np.ndarray

    @staticmethod
    def _mean(x: np.ndarray) -> float:
        x = x[~np.isnan(x)]
        return float(x.mean()) if x.size else float("nan")

    @property
    def mean_iou(self) -> float:
        return self._mean(self.iou)

    @property
    def miou_percent(self) -> float:
        return 100.0 * self.mean_iou

    @property
    def mean_precision(self) -> float:
        return self._mean(self.precision)

    @property
    def mean_recall(self) -> float:
        return self._mean(self.recall)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE_INDEX) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    keep = gt != ignore
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise ValueError(f"ground-truth class outside 0..{num_classes - 1}")
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise ValueError(f"predicted class outside 0..{num_classes - 1}")
    counts = np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)
    return ConfusionMatrix(counts.astype(np.int64), int((~keep).sum()))


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def scores(cm: ConfusionMatrix) -> ClassScores:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    return ClassScores(
        iou=_ratio(tp, tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


def boundary(gt: np.ndarray, ignore: int = IGNORE_INDEX) -> np.ndarray:
    """Pixels with a 4-neighbour of a different class; both pixels must be labelled."""
    gt = np.asarray(gt)
    b = np.zeros(gt.shape, dtype=bool)
    valid = gt != ignore
    for axis in (0, 1):
        a = np.take(gt, range(gt.shape[axis] - 1), axis=axis)
        c = np.take(gt, range(1, gt.shape[axis]), axis=axis)
        va = np.take(valid, range(gt.shape[axis] - 1), axis=axis)
        vc = np.take(valid, range(1, gt.shape[axis]), axis=axis)
        edge = (a != c) & va & vc
        if axis == 0:
            b[:-1] |= edge
            b[1:] |= edge
        else:
            b[:, :-1] |= edge
            b[:, 1:] |= edge
    return b


def trimap_band(gt: np.ndarray, width: int, ignore: int = IGNORE_INDEX) -> np.ndarray:
    """Pixels whose Euclidean distance to the class boundary is below `width`."""
    if width < 1:
        raise ValueError("trimap width must be >= 1")
    b = boundary(gt, ignore)
    if not b.any():
        return b
    return distance_transform_edt(~b) < width


def trimap_counts(pred: np.ndarray, gt: np.ndarray, width: int, ignore: int = IGNORE_INDEX) -> tuple[int, int]:
    """(wrong, total) over labelled pixels of the band."""
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch: {np.shape(pred)} vs {np.shape(gt)}")
    band = trimap_band(gt, width, ignore) & (gt != ignore)
    return int((pred[band] != gt[band]).sum()), int(band.sum())


def trimap_error(pred: np.ndarray, gt: np.ndarray, width: int, ignore: int = IGNORE_INDEX) -> float:
    wrong, total = trimap_counts(pred, gt, width, ignore)
    if total == 0:
        log.warning("trimap_error: empty band at width %d", width)
        return 0.0
    return wrong / total


@dataclass
class LatentCloud:
    points: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,)
    iteration: int = 0


def _clusters(cloud: LatentCloud):
    x = np.asarray(cloud.points, dtype=np.float64)
    labels = np.asarray(cloud.labels)
    ks = np.unique(labels)
    return x, labels, ks


def silhouette(cloud: LatentCloud) -> float:
    x, labels, ks = _clusters(cloud)
    if ks.size < 2:
        raise UndefinedScoreError("silhouette needs at least 2 clusters")
    sizes = np.array([(labels == k).sum() for k in ks])
    if sizes.min() < 2:
        raise UndefinedScoreError("silhouette undefined for singleton clusters")
    d = cdist(x, x)
    idx = np.searchsorted(ks, labels)
    # sum of distances from every point to every cluster
    sums = np.stack([d[:, labels == k].sum(axis=1) for k in ks], axis=1)
    own = sums[np.arange(len(x)), idx]
    a = own / (sizes[idx] - 1)
    means = sums / sizes[None]
    means[np.arange(len(x)), idx] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1), 0.0)
    return float(s.mean())


def calinski_harabasz(cloud: LatentCloud) -> float:
    x, labels, ks = _clusters(cloud)
    n, k = len(x), ks.size
    if not 1 < k < n:
        raise UndefinedScoreError(f"Calinski-Harabasz needs 1 < k < N (k={k}, N={n})")
    c = x.mean(axis=0)
    ss_m = ss_w = 0.0
    for lab in ks:
        pts = x[labels == lab]
        ci = pts.mean(axis=0)
        ss_m += len(pts) * float(((ci - c) ** 2).sum())
        ss_w += float(((pts - ci) ** 2).sum())
    if ss_w == 0:
        return float("inf")
    return ss_m / ss_w * (n - k) / (k - 1)


def davies_bouldin(cloud: LatentCloud) -> float:
    x, labels, ks = _clusters(cloud)
    if ks.size < 2:
        raise UndefinedScoreError("Davies-Bouldin needs at least 2 clusters")
    cents = np.stack([x[labels == k].mean(axis=0) for k in ks])
    s = np.array([np.linalg.norm(x[labels == k] - c, axis=1).mean() for k, c in zip(ks, cents)])
    d = cdist(cents, cents)
    np.fill_diagonal(d, np.inf)
    if (d == 0).any():
        raise UndefinedScoreError("Davies-Bouldin undefined for coincident centroids")
    r = (s[:, None] + s[None, :]) / d
    return float(r.max(axis=1).mean())


def project_2d(cloud: LatentCloud) -> np.ndarray:
    """Top-2 principal-component scores; each axis signed so its largest loading is positive."""
    x = np.asarray(cloud.points, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 points")
    xc = x - x.mean(axis=0)
    out = np.zeros((x.shape[0], 2))
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return out
    tol = sv[0] * max(xc.shape) * np.finfo(np.float64).eps
    for j in range(min(2, sv.size)):
        if sv[j] <= tol:
            break
        v = vt[j]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, j] = xc @ v
    return out

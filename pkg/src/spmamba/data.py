"""Synthetic labelled rooms, SPC1 text I/O, augmentation, and mIoU."""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .sparse import IGNORE_LABEL, PointCloud

CLASS_NAMES = ("floor", "wall", "box", "sphere", "clutter")
CLASS_COLORS = np.array([
    [0.55, 0.45, 0.35],
    [0.85, 0.85, 0.80],
    [0.20, 0.35, 0.75],
    [0.80, 0.25, 0.20],
    [0.30, 0.70, 0.30],
])


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


# -- synthetic scenes ------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    extent: float = 4.0
    points_per_scene: int = 20000
    noise_sigma: float = 0.005
    color_sigma: float = 0.05
    n_boxes: int = 3
    n_spheres: int = 2
    # fraction of points per class, in CLASS_NAMES order
    class_fractions: tuple[float, ...] = (0.25, 0.25, 0.2, 0.15, 0.15)


def _box_surface(rng, n, center, size):
    # area-weighted face choice
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign * np.asarray(size)[axis]
    return center + u


def _sphere_surface(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> PointCloud:
    """A box-shaped room: floor, two walls, boxes and spheres on the floor, scattered clutter.

    RGB features are the class colour plus Gaussian noise, clipped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    ext = spec.extent
    frac = np.asarray(spec.class_fractions, dtype=np.float64)
    counts = np.floor(frac / frac.sum() * spec.points_per_scene).astype(int)
    counts[0] += spec.points_per_scene - counts.sum()
    parts, labels = [], []

    # floor z = 0
    n = counts[0]
    parts.append(np.c_[rng.uniform(0, ext, size=(n, 2)), np.zeros(n)])
    # walls at x = 0 and y = 0, height ext / 2
    n = counts[1]
    side = rng.integers(0, 2, size=n)
    a = rng.uniform(0, ext, size=n)
    h = rng.uniform(0, ext / 2, size=n)
    parts.append(np.where(side[:, None] == 0, np.c_[np.zeros(n), a, h], np.c_[a, np.zeros(n), h]))
    # boxes resting on the floor
    n = counts[2]
    per = np.array_split(np.arange(n), max(spec.n_boxes, 1))
    pts = []
    for idx in per:
        size = rng.uniform(0.3, 0.9, size=3) * ext / 4
        center = np.r_[rng.uniform(0.25 * ext, 0.75 * ext, size=2), size[2] / 2]
        pts.append(_box_surface(rng, idx.size, center, size))
    parts.append(np.concatenate(pts))
    # spheres resting on the floor
    n = counts[3]
    per = np.array_split(np.arange(n), max(spec.n_spheres, 1))
    pts = []
    for idx in per:
        r = rng.uniform(0.1, 0.2) * ext
        center = np.r_[rng.uniform(0.2 * ext, 0.8 * ext, size=2), r]
        pts.append(_sphere_surface(rng, idx.size, center, r))
    parts.append(np.concatenate(pts))
    # clutter: small blobs in the upper half of the room
    n = counts[4]
    centers = rng.uniform([0.2 * ext, 0.2 * ext, 0.6 * ext / 2], [ext, ext, ext / 2], size=(4, 3))
    parts.append(centers[rng.integers(0, 4, size=n)] + rng.normal(scale=0.05 * ext, size=(n, 3)))

    for k, c in enumerate(counts):
        labels.append(np.full(c, k, dtype=np.int64))
    coords = np.concatenate(parts) + rng.normal(scale=spec.noise_sigma, size=(spec.points_per_scene, 3))
    labels = np.concatenate(labels)
    colors = np.clip(CLASS_COLORS[labels] + rng.normal(scale=spec.color_sigma, size=(labels.size, 3)), 0.0, 1.0)
    perm = rng.permutation(labels.size)
    return PointCloud(coords[perm], colors[perm], labels[perm])


# -- augmentation ----------------------------------------------------------------

def augment(pc: PointCloud, seed: int, scale_range=(0.9, 1.1), flip_p: float = 0.5,
            color_sigma: float = 0.02, rgb_slice: slice = slice(0, 3)) -> PointCloud:
    """Random z rotation, per-axis flips, isotropic scaling and RGB jitter; labels unchanged."""
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    flips = np.where(rng.uniform(size=3) < flip_p, -1.0, 1.0)
    scale = rng.uniform(*scale_range)
    coords = (pc.coords @ rot.T) * flips * scale
    feats = pc.feats.copy()
    rgb = feats[:, rgb_slice]
    feats[:, rgb_slice] = np.clip(rgb + rng.normal(scale=color_sigma, size=rgb.shape), 0.0, 1.0)
    labels = None if pc.labels is None else pc.labels.copy()
    return PointCloud(coords, feats, labels)


# -- SPC1 text format ------------------------------------------------------------

def save_pointcloud(path: str | os.PathLike, pc: PointCloud) -> None:
    has = pc.labels is not None
    lines = [f"SPC1 {len(pc)} {pc.feat_dim} {int(has)}"]
    for i in range(len(pc)):
        vals = [repr(float(v)) for v in pc.coords[i]] + [repr(float(v)) for v in pc.feats[i]]
        if has:
            vals.append(str(int(pc.labels[i])))
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pointcloud(path: str | os.PathLike) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ParseError(path, 1, "empty file")
    head = text[0].split()
    if len(head) != 4 or head[0] != "SPC1":
        raise ParseError(path, 1, "expected header 'SPC1 <N> <feat_dim> <has_labels>'")
    try:
        n, c, has = int(head[1]), int(head[2]), int(head[3])
    except ValueError:
        raise ParseError(path, 1, "header fields must be integers") from None
    if n < 1 or c < 0 or has not in (0, 1):
        raise ParseError(path, 1, "invalid header values")
    body = [(i + 2, ln) for i, ln in enumerate(text[1:]) if ln.strip()]
    if len(body) != n:
        line = body[n][0] if len(body) > n else len(text) + 1
        raise ParseError(path, line, f"header declares {n} points, body has {len(body)}")
    width = 3 + c + has
    coords = np.empty((n, 3))
    feats = np.empty((n, c))
    labels = np.empty(n, dtype=np.int64) if has else None
    for row, (lineno, ln) in enumerate(body):
        vals = ln.split()
        if len(vals) != width:
            raise ParseError(path, lineno, f"expected {width} values, found {len(vals)}")
        try:
            nums = [float(v) for v in vals[:3 + c]]
            if has:
                labels[row] = int(vals[-1])
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        coords[row] = nums[:3]
        feats[row] = nums[3:]
    return PointCloud(coords, feats, labels)


def load_dataset(directory: str | os.PathLike) -> list[PointCloud]:
    files = sorted(Path(directory).glob("*.spc"))
    return [load_pointcloud(f) for f in files]


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricState:
    num_classes: int
    ignore_index: int = IGNORE_LABEL

    def __post_init__(self):
        self.confusion = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, preds, labels) -> None:
        preds = np.asarray(preds, dtype=np.int64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if preds.shape != labels.shape:
            raise ValueError("preds and labels differ in length")
        keep = labels != self.ignore_index
        k = self.num_classes
        if np.any((labels[keep] < 0) | (labels[keep] >= k)) or np.any((preds[keep] < 0) | (preds[keep] >= k)):
            raise ValueError(f"class ids must lie in [0, {k})")
        self.confusion += np.bincount(labels[keep] * k + preds[keep], minlength=k * k).reshape(k, k)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from labels."""
        tp = np.diag(self.confusion).astype(np.float64)
        gt = self.confusion.sum(1)
        pred = self.confusion.sum(0)
        union = gt + pred - tp
        out = np.full(self.num_classes, np.nan)
        present = gt > 0
        out[present] = tp[present] / union[present]
        return out

    def miou(self) -> float:
        """Mean IoU over classes present in the labels, correctly rounded.

        The mean is taken over exact rationals, so e.g. IoUs 1/2 and 2/3 give
        exactly float(7/12) rather than a float sum's rounding.
        """
        tp = np.diag(self.confusion)
        gt = self.confusion.sum(1)
        union = gt + self.confusion.sum(0) - tp
        terms = [Fraction(int(t), int(u)) for t, u, g in zip(tp, union, gt) if g > 0]
        return float(sum(terms) / len(terms)) if terms else float("nan")

    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")


def evaluate_miou(preds, labels, num_classes: int, ignore_index: int = IGNORE_LABEL) -> tuple[np.ndarray, float]:
    """Per-class IoU = TP / (TP + FP + FN) and their mean over classes present in ``labels``."""
    st = MetricState(num_classes, ignore_index)
    st.update(preds, labels)
    return st.iou(), st.miou()

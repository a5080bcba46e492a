"""Sparse voxel grids: voxelization, submanifold convolution, grid pooling."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor import ShapeError, Tensor, _make, segment_max, segment_mean, take_rows

IGNORE_LABEL = -1

# (dx, dy, dz) in {-1, 0, 1}^3, dx slowest; index 13 is the center.
OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)], dtype=np.int64)
CENTER = 13


@dataclass
class PointCloud:
    coords: np.ndarray
    feats: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        n = self.coords.shape[0]
        feats = np.asarray(self.feats, dtype=np.float64)
        self.feats = feats.reshape(n, -1) if feats.size else np.zeros((n, 0))
        if n == 0:
            raise ValueError("point cloud is empty")
        if not np.all(np.isfinite(self.coords)) or not np.all(np.isfinite(self.feats)):
            raise ValueError("point cloud contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]

    def permuted(self, perm: np.ndarray) -> "PointCloud":
        return PointCloud(self.coords[perm], self.feats[perm], None if self.labels is None else self.labels[perm])


def _cell_hash(cells: np.ndarray, extent: int) -> np.ndarray:
    # +1 keeps neighbor offsets of boundary cells nonnegative
    c = cells.astype(np.int64) + 1
    return (c[:, 0] * extent + c[:, 1]) * extent + c[:, 2]


@dataclass
class VoxelSet:
    """Unique active cells, rows in lexicographic cell order."""

    grid_size: float
    cells: np.ndarray
    point_to_cell: np.ndarray
    cell_feats: np.ndarray | None = None
    cell_labels: np.ndarray | None = None
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def __len__(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def _index(self) -> tuple[int, np.ndarray, np.ndarray]:
        extent = int(self.cells.max()) + 3 if len(self) else 3
        keys = _cell_hash(self.cells, extent)
        order = np.argsort(keys, kind="stable")
        return extent, keys[order], order

    def lookup(self, cells: np.ndarray) -> np.ndarray:
        """Row of each queried cell, or -1 where the cell is inactive."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        extent, sorted_keys, order = self._index
        inside = np.all((cells >= -1) & (cells <= extent - 2), axis=1)
        keys = _cell_hash(np.where(inside[:, None], cells, 0), extent)
        pos = np.clip(np.searchsorted(sorted_keys, keys), 0, len(sorted_keys) - 1)
        found = inside & (sorted_keys[pos] == keys)
        return np.where(found, order[pos], -1)

    @cached_property
    def neighbor_table(self) -> np.ndarray:
        return build_neighbor_table(self)


def _majority(labels: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    out = np.full(n_groups, IGNORE_LABEL, dtype=np.int64)
    keep = labels >= 0
    if not keep.any():
        return out
    k = int(labels[keep].max()) + 1
    votes = np.zeros((n_groups, k), dtype=np.int64)
    np.add.at(votes, (groups[keep], labels[keep]), 1)
    has = votes.sum(1) > 0
    # argmax returns the first maximum, i.e. the smallest label id on ties
    out[has] = votes[has].argmax(1)
    return out


def voxelize(pc: PointCloud, grid_size: float) -> VoxelSet:
    """Quantize to ``floor(coord / grid_size)``, merge co-located points, shift min cell to the origin.

    Features are averaged in a canonical point order so the result does not
    depend on input row order.
    """
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    if len(pc) == 0:
        raise ValueError("cannot voxelize an empty point cloud")
    raw = np.floor(pc.coords / grid_size).astype(np.int64)
    origin = raw.min(axis=0)
    shifted = raw - origin
    cells, inverse = np.unique(shifted, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = cells.shape[0]
    # canonical order: by cell, then by features and coordinates
    sort_keys = [pc.coords[:, i] for i in range(2, -1, -1)] + [pc.feats[:, i] for i in range(pc.feat_dim - 1, -1, -1)]
    order = np.lexsort(tuple(sort_keys) + (inverse,))
    starts = np.searchsorted(inverse[order], np.arange(m))
    counts = np.bincount(inverse, minlength=m)
    if pc.feat_dim:
        sums = np.add.reduceat(pc.feats[order], starts, axis=0)
        feats = sums / counts[:, None]
    else:
        feats = np.zeros((m, 0))
    labels = None if pc.labels is None else _majority(pc.labels, inverse, m)
    return VoxelSet(grid_size, cells, inverse, feats, labels, origin)


def build_neighbor_table(vs: VoxelSet) -> np.ndarray:
    """``[M, 27]`` rows of each offset neighbor (see ``OFFSETS``), -1 when absent."""
    m = len(vs)
    table = np.empty((m, 27), dtype=np.int64)
    for k, off in enumerate(OFFSETS):
        table[:, k] = vs.lookup(vs.cells + off)
    return table


def submconv3d(table: np.ndarray, x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Submanifold 3x3x3 convolution evaluated only at active cells.

    out[i] = sum_k x[table[i, k]] @ weight[k] + bias, skipping absent neighbors.
    Each row is one fixed-order dot product over the flattened (offset, channel)
    axis, so results do not depend on how many rows are evaluated.
    """
    m, cin = x.shape
    if weight.shape[0] != 27 or weight.shape[1] != cin:
        raise ShapeError(f"weight {weight.shape} does not match input channels {cin}")
    cout = weight.shape[2]
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},)")
    if table.shape != (m, 27):
        raise ShapeError("neighbor table does not match feature rows")
    idx = np.where(table < 0, m, table)
    xp = np.concatenate([x.data, np.zeros((1, cin))], axis=0)
    gathered = xp[idx].reshape(m, 27 * cin)
    out = gathered @ weight.data.reshape(27 * cin, cout) + bias.data

    def backward(g):
        gp = np.concatenate([g, np.zeros((1, cout))], axis=0)
        dw = (gathered.T @ g).reshape(27, cin, cout)
        # neighbor relation is symmetric: offset k from i <-> offset 26-k from j
        back = gp[idx[:, ::-1]].reshape(m, 27 * cout)
        dx = back @ weight.data.transpose(0, 2, 1).reshape(27 * cout, cin)
        return dx, dw, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward, "submconv3d")


@dataclass(frozen=True)
class PoolingMap:
    parent: np.ndarray  # fine row -> coarse row
    counts: np.ndarray  # children per coarse row

    def __post_init__(self):
        if self.counts.sum() != self.parent.size:
            raise ValueError("pooling counts do not sum to the fine cell count")


def pool_geometry(vs: VoxelSet, factor: int) -> tuple[VoxelSet, PoolingMap]:
    """Coarse cells ``floor(cell / factor)`` and the fine -> coarse map."""
    if factor < 1:
        raise ValueError("pooling factor must be >= 1")
    cells, parent = np.unique(np.floor_divide(vs.cells, factor), axis=0, return_inverse=True)
    parent = parent.reshape(-1)
    mc = cells.shape[0]
    labels = None if vs.cell_labels is None else _majority(vs.cell_labels, parent, mc)
    coarse = VoxelSet(vs.grid_size * factor, cells, parent[vs.point_to_cell], None, labels, vs.origin)
    return coarse, PoolingMap(parent, np.bincount(parent, minlength=mc))


def pool_features(feats: Tensor, pmap: PoolingMap, reduce: str = "mean") -> Tensor:
    if reduce == "mean":
        return segment_mean(feats, pmap.parent, pmap.counts.size)
    if reduce == "max":
        return segment_max(feats, pmap.parent, pmap.counts.size)
    raise ValueError(f"unknown pooling reduction {reduce!r}")


def grid_pool(vs: VoxelSet, feats: Tensor, factor: int, reduce: str = "mean") -> tuple[VoxelSet, Tensor, PoolingMap]:
    """Merge cells under ``floor(cell / factor)`` and pool their features."""
    if feats.shape[0] != len(vs):
        raise ShapeError("feature rows do not match the voxel set")
    coarse, pmap = pool_geometry(vs, factor)
    pooled = pool_features(feats, pmap, reduce)
    coarse.cell_feats = pooled.data
    return coarse, pooled, pmap


def grid_unpool(coarse_feats: Tensor, pmap: PoolingMap) -> Tensor:
    """Broadcast each coarse row back to its fine children."""
    if pmap.parent.size and (pmap.parent.min() < 0 or pmap.parent.max() >= coarse_feats.shape[0]):
        raise IndexError("pooling map references a coarse row that does not exist")
    return take_rows(coarse_feats, pmap.parent)

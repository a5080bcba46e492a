"""Space-filling curve codecs for 3D integer cells and point serialization.

All codecs are vectorized: they accept an ``(..., 3)`` integer array of cells
(or a single triple) and return unsigned 64-bit keys.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

MAX_DEPTH = 16


class SerializationPattern(str, enum.Enum):
    Z = "z"
    TRANS_Z = "z-trans"
    HILBERT = "hilbert"
    TRANS_HILBERT = "hilbert-trans"

    @classmethod
    def parse(cls, name: "str | SerializationPattern") -> "SerializationPattern":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(f"unknown serialization pattern {name!r}; expected one of {[p.value for p in cls]}") from None


ALL_PATTERNS = tuple(SerializationPattern)


def _check_depth(depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [1, {MAX_DEPTH}], got {depth}")


def _as_cells(cell, depth: int) -> tuple[np.ndarray, bool]:
    _check_depth(depth)
    arr = np.asarray(cell)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr).astype(np.int64)
    if arr.shape[-1] != 3:
        raise ValueError("cells must have 3 coordinates")
    if np.any(arr < 0) or np.any(arr >= (1 << depth)):
        raise ValueError(f"cell coordinate out of range for depth {depth}")
    return arr.astype(np.uint64), scalar


def _as_keys(key, depth: int) -> tuple[np.ndarray, bool]:
    _check_depth(depth)
    arr = np.asarray(key)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if np.any(arr.astype(np.float64) < 0):
        raise ValueError("keys must be nonnegative")
    arr = arr.astype(np.uint64)
    if np.any(arr >= np.uint64(1) << np.uint64(3 * depth)):
        raise ValueError(f"key out of range for depth {depth}")
    return arr, scalar


def _ret_key(keys: np.ndarray, scalar: bool):
    return int(keys[0]) if scalar else keys


def _ret_cell(cells: np.ndarray, scalar: bool):
    cells = cells.astype(np.int64)
    return tuple(int(v) for v in cells[0]) if scalar else cells


# -- Z-order (Morton) -------------------------------------------------------

def z_encode(cell, depth: int):
    """Interleave bits; source bit j of x, y, z lands at 3j, 3j+1, 3j+2."""
    cells, scalar = _as_cells(cell, depth)
    key = np.zeros(cells.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for j in range(depth):
        for axis in range(3):
            bit = (cells[:, axis] >> np.uint64(j)) & one
            key |= bit << np.uint64(3 * j + axis)
    return _ret_key(key, scalar)


def z_decode(key, depth: int):
    keys, scalar = _as_keys(key, depth)
    cells = np.zeros((keys.shape[0], 3), dtype=np.uint64)
    one = np.uint64(1)
    for j in range(depth):
        for axis in range(3):
            cells[:, axis] |= ((keys >> np.uint64(3 * j + axis)) & one) << np.uint64(j)
    return _ret_cell(cells, scalar)


# -- Hilbert (Skilling transpose construction) ------------------------------

def _axes_to_transpose(x: np.ndarray, depth: int) -> np.ndarray:
    x = x.copy()
    n = x.shape[1]
    q = np.uint64(1) << np.uint64(depth - 1)
    while q > 1:
        p = q - np.uint64(1)
        for i in range(n):
            hit = (x[:, i] & q) != 0
            # invert low bits of x0 where bit set, else swap low bits of x0 and xi
            t = (x[:, 0] ^ x[:, i]) & p
            x0_new = np.where(hit, x[:, 0] ^ p, x[:, 0] ^ t)
            xi_new = np.where(hit, x[:, i], x[:, i] ^ t)
            x[:, 0] = x0_new
            if i:
                x[:, i] = xi_new
        q >>= np.uint64(1)
    for i in range(1, n):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(x.shape[0], dtype=np.uint64)
    q = np.uint64(1) << np.uint64(depth - 1)
    while q > 1:
        t = np.where((x[:, n - 1] & q) != 0, t ^ (q - np.uint64(1)), t)
        q >>= np.uint64(1)
    x ^= t[:, None]
    return x


def _transpose_to_axes(x: np.ndarray, depth: int) -> np.ndarray:
    x = x.copy()
    n = x.shape[1]
    t = x[:, n - 1] >> np.uint64(1)
    for i in range(n - 1, 0, -1):
        x[:, i] ^= x[:, i - 1]
    x[:, 0] ^= t
    q = np.uint64(2)
    top = np.uint64(1) << np.uint64(depth)
    while q != top:
        p = q - np.uint64(1)
        for i in range(n - 1, -1, -1):
            hit = (x[:, i] & q) != 0
            t = (x[:, 0] ^ x[:, i]) & p
            x0_new = np.where(hit, x[:, 0] ^ p, x[:, 0] ^ t)
            xi_new = np.where(hit, x[:, i], x[:, i] ^ t)
            x[:, 0] = x0_new
            if i:
                x[:, i] = xi_new
        q <<= np.uint64(1)
    return x


def hilbert_encode(cell, depth: int):
    """Hilbert index; consecutive keys map to face-adjacent cells, key 0 is the origin."""
    cells, scalar = _as_cells(cell, depth)
    tr = _axes_to_transpose(cells, depth)
    key = np.zeros(cells.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for j in range(depth - 1, -1, -1):
        for axis in range(3):
            key = (key << one) | ((tr[:, axis] >> np.uint64(j)) & one)
    return _ret_key(key, scalar)


def hilbert_decode(key, depth: int):
    keys, scalar = _as_keys(key, depth)
    tr = np.zeros((keys.shape[0], 3), dtype=np.uint64)
    one = np.uint64(1)
    shift = 3 * depth
    for j in range(depth - 1, -1, -1):
        for axis in range(3):
            shift -= 1
            tr[:, axis] |= ((keys >> np.uint64(shift)) & one) << np.uint64(j)
    return _ret_cell(_transpose_to_axes(tr, depth), scalar)


# -- patterns ----------------------------------------------------------------

def _rotate(cells: np.ndarray) -> np.ndarray:
    # (x, y, z) -> (y, z, x)
    return cells[..., [1, 2, 0]]


def apply_pattern(pattern, cell, depth: int):
    """Curve key of ``cell`` under ``pattern``; trans variants rotate axes first."""
    pattern = SerializationPattern.parse(pattern)
    arr = np.asarray(cell)
    if pattern in (SerializationPattern.TRANS_Z, SerializationPattern.TRANS_HILBERT):
        arr = _rotate(arr)
    if pattern in (SerializationPattern.Z, SerializationPattern.TRANS_Z):
        return z_encode(arr, depth)
    return hilbert_encode(arr, depth)


def depth_for(cells: np.ndarray) -> int:
    """Smallest depth whose cube holds every (nonnegative) cell."""
    m = int(np.max(cells)) if np.size(cells) else 0
    return max(1, m.bit_length())


@dataclass(frozen=True)
class SerializationOrder:
    pattern: SerializationPattern
    perm: np.ndarray  # sequence position -> point row
    inv_perm: np.ndarray  # point row -> sequence position
    keys: np.ndarray  # curve keys in sequence order


def order_points(cells, pattern, depth: int | None = None) -> SerializationOrder:
    """Sort rows by (curve key, x, y, z)."""
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    pattern = SerializationPattern.parse(pattern)
    if depth is None:
        depth = depth_for(cells)
    keys = np.atleast_1d(apply_pattern(pattern, cells, depth))
    perm = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0], keys))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return SerializationOrder(pattern, perm, inv, keys[perm])

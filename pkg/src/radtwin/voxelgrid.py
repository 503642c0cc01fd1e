"""Occupancy voxel grid over a point cloud.

Occupied voxels are stored sorted by their (ix, iy, iz) index triple, so
voxel ``k`` always refers to the same cell for a given cloud. Dense arrays
built from the grid use x-fastest memory order, i.e. numpy shape
``(nz, ny, nx)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np


class PointOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    voxel_size: np.ndarray  # (3,)
    grid_dims: Tuple[int, int, int]  # (W', H', D') = cells along x, y, z
    indices: np.ndarray  # (K, 3) int64, lexicographically sorted
    centers: np.ndarray  # (K, 3)
    point_counts: np.ndarray  # (K,)
    origin: np.ndarray  # (3,)
    room_dims: np.ndarray  # (3,)

    def __len__(self):
        return len(self.indices)

    @property
    def n_occupied(self) -> int:
        return len(self.indices)

    @property
    def box_min(self) -> np.ndarray:
        return self.origin + self.indices * self.voxel_size

    @property
    def box_max(self) -> np.ndarray:
        return self.box_min + self.voxel_size

    def occupancy(self) -> np.ndarray:
        """Dense boolean occupancy of shape (nz, ny, nx)."""
        occ = np.zeros(self.grid_dims[::-1], dtype=bool)
        occ[self.indices[:, 2], self.indices[:, 1], self.indices[:, 0]] = True
        return occ

    def lookup(self) -> np.ndarray:
        """Dense (nz, ny, nx) map from cell to occupied-voxel index, -1 if empty."""
        table = np.full(self.grid_dims[::-1], -1, dtype=np.int64)
        table[self.indices[:, 2], self.indices[:, 1], self.indices[:, 0]] = np.arange(len(self))
        return table

    def cell_of(self, p) -> np.ndarray:
        """Half-open cell index of ``p``; the room's top boundary folds into the last cell."""
        p = np.asarray(p, dtype=float)
        idx = np.floor((p - self.origin) / self.voxel_size).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.grid_dims) - 1)

    def voxel_containing(self, p) -> int:
        cell = self.cell_of(p)
        return int(self.lookup()[cell[..., 2], cell[..., 1], cell[..., 0]])

    def to_dict(self) -> dict:
        return {
            "dims": list(self.grid_dims),
            "voxel_size": self.voxel_size.tolist(),
            "origin": self.origin.tolist(),
            "occupied": [
                {"index": idx.tolist(), "center": c.tolist(), "point_count": int(n)}
                for idx, c, n in zip(self.indices, self.centers, self.point_counts)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def grid_dims_for(room_dims, voxel_size) -> Tuple[int, int, int]:
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,))
    # tolerance keeps 6.0 / 0.5 from rounding up to 13
    return tuple(int(math.ceil(r / v - 1e-9)) for r, v in zip(room_dims, vs))


def voxelize(points, room_dims, voxel_size=0.5, min_points: int = 2, origin=(0.0, 0.0, 0.0)) -> VoxelGrid:
    points = np.asarray(getattr(points, "points", points), dtype=float).reshape(-1, 3)
    room = np.asarray(room_dims, dtype=float)
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,)).copy()
    origin = np.asarray(origin, dtype=float)
    if np.any(vs <= 0):
        raise ValueError("voxel_size must be positive")
    if min_points < 1:
        raise ValueError("min_points must be >= 1")
    rel = points - origin
    bad = np.any(rel < 0, axis=1) | np.any(rel > room, axis=1)
    if np.any(bad):
        raise PointOutOfBounds(f"point out of bounds: {points[np.argmax(bad)].tolist()}")

    dims = grid_dims_for(room, vs)
    idx = np.floor(rel / vs).astype(np.int64)
    idx = np.minimum(idx, np.asarray(dims) - 1)
    cells, counts = np.unique(idx, axis=0, return_counts=True)  # lexicographic by (ix, iy, iz)
    keep = counts >= min_points
    cells, counts = cells[keep], counts[keep]
    centers = origin + (cells + 0.5) * vs
    return VoxelGrid(vs, dims, cells, centers, counts, origin, room)


def voxel_aabb(grid: VoxelGrid, k: int):
    if not 0 <= k < len(grid):
        raise IndexError(f"voxel index {k} out of range for {len(grid)} occupied voxels")
    lo = grid.origin + grid.indices[k] * grid.voxel_size
    return lo, lo + grid.voxel_size


def cell_counts(points, room_dims, voxel_size=0.5, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Per-cell point counts before thresholding, shape (nz, ny, nx)."""
    pts = np.asarray(getattr(points, "points", points), dtype=float).reshape(-1, 3)
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=float), (3,))
    dims = grid_dims_for(room_dims, vs)
    idx = np.minimum(np.floor((pts - np.asarray(origin)) / vs).astype(np.int64), np.asarray(dims) - 1)
    out = np.zeros(dims[::-1], dtype=np.int64)
    np.add.at(out, (idx[:, 2], idx[:, 1], idx[:, 0]), 1)
    return out

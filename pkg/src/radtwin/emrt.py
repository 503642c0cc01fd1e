"""LOS voxel maps and sparse attention masks.

Angles are degrees. ``phi`` is the inclination from +Z and ``theta`` the
azimuth from +X, so a direction is ``(sin phi cos theta, sin phi sin theta,
cos phi)``. Per-direction arrays are laid out with elevation rows and
azimuth columns: shape ``(n_phi, n_theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .voxelgrid import VoxelGrid

NO_HIT = -1


class ReceiverOutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class DirectionGrid:
    n_theta: int = 36
    n_phi: int = 19

    def __post_init__(self):
        if self.n_theta < 1 or self.n_phi < 2:
            raise ValueError("need n_theta >= 1 and n_phi >= 2")

    @property
    def theta_step(self) -> float:
        return 360.0 / self.n_theta

    @property
    def phi_step(self) -> float:
        return 180.0 / (self.n_phi - 1)

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(self.n_theta) * self.theta_step

    @property
    def phis(self) -> np.ndarray:
        return np.arange(self.n_phi) * self.phi_step

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_phi, self.n_theta)

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    def angles(self) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened (theta, phi) per direction in row order (phi-major)."""
        phi, theta = np.meshgrid(self.phis, self.thetas, indexing="ij")
        return theta.ravel(), phi.ravel()

    def vectors(self) -> np.ndarray:
        theta, phi = self.angles()
        return direction_vector(theta, phi)

    @classmethod
    def from_step(cls, step_deg: float = 10.0) -> "DirectionGrid":
        return cls(int(round(360.0 / step_deg)), int(round(180.0 / step_deg)) + 1)


def direction_vector(theta, phi) -> np.ndarray:
    th = np.deg2rad(np.mod(np.asarray(theta, dtype=float), 360.0))
    ph = np.deg2rad(np.asarray(phi, dtype=float))
    s = np.sin(ph)
    return np.stack([s * np.cos(th), s * np.sin(th), np.cos(ph)], axis=-1)


def slab_intervals(origins, dirs, box_min, box_max):
    """Entry/exit distances for rays against boxes, broadcasting over leading dims.

    ``origins``/``dirs`` are (..., 3) and the boxes (..., 3); a zero direction
    component gives an unbounded slab when the origin lies in ``[lo, hi)`` and
    an empty one otherwise.
    """
    o = np.asarray(origins, dtype=float)
    d = np.asarray(dirs, dtype=float)
    lo = np.asarray(box_min, dtype=float)
    hi = np.asarray(box_max, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    flat = d == 0
    if np.any(flat):
        inside = (o >= lo) & (o < hi)
        flat = np.broadcast_to(flat, tmin.shape)
        inside = np.broadcast_to(inside, tmin.shape)
        tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    return tmin.max(axis=-1), tmax.min(axis=-1)


def ray_box_intersect(origin, direction, box) -> Optional[Tuple[float, float]]:
    d = np.asarray(direction, dtype=float)
    if not np.any(d != 0):
        raise ValueError("ray direction must be nonzero")
    t_enter, t_exit = slab_intervals(origin, d, box[0], box[1])
    if t_enter < t_exit and t_exit > 0:
        return float(t_enter), float(t_exit)
    return None


def first_hits(origin, dirs, grid: VoxelGrid, skip: Optional[int] = None, chunk: int = 4096) -> np.ndarray:
    """Nearest valid voxel hit per ray from a single origin; ``NO_HIT`` when the ray escapes."""
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    out = np.full(len(dirs), NO_HIT, dtype=np.int64)
    if len(grid) == 0:
        return out
    lo, hi = grid.box_min, grid.box_max
    o = np.asarray(origin, dtype=float)
    for s in range(0, len(dirs), chunk):
        d = dirs[s:s + chunk, None, :]
        t_enter, t_exit = slab_intervals(o, d, lo[None], hi[None])
        valid = (t_enter < t_exit) & (t_exit > 0)
        if skip is not None and skip >= 0:
            valid[:, skip] = False
        t = np.where(valid, t_enter, np.inf)
        best = np.argmin(t, axis=1)
        hit = np.isfinite(t[np.arange(len(best)), best])
        out[s:s + chunk] = np.where(hit, best, NO_HIT)
    return out


@dataclass
class LosMap:
    rx_position: np.ndarray
    hits: np.ndarray  # (n_phi, n_theta) int, NO_HIT for empty
    dirs: DirectionGrid = field(default_factory=DirectionGrid)


def _check_rx(rx, grid: VoxelGrid):
    rx = np.asarray(rx, dtype=float)
    rel = rx - grid.origin
    if np.any(rel < 0) or np.any(rel > grid.room_dims):
        raise ReceiverOutOfBounds(f"receiver out of bounds: {rx.tolist()}")
    return rx


def build_los_map(rx, grid: VoxelGrid, dirs: DirectionGrid = DirectionGrid()) -> LosMap:
    rx = _check_rx(rx, grid)
    own = grid.voxel_containing(rx)  # skipped, otherwise every ray stops at t = 0
    hits = first_hits(rx, dirs.vectors(), grid, skip=own)
    return LosMap(rx, hits.reshape(dirs.shape), dirs)


def _angle_members(dirs: DirectionGrid, theta: float, phi: float, d_theta: float, d_phi: float):
    eps = 1e-9
    dth = np.abs(np.mod(dirs.thetas - theta + 180.0, 360.0) - 180.0)
    cols = np.nonzero(dth <= d_theta + eps)[0]
    rows = np.nonzero((dirs.phis >= phi - d_phi - eps) & (dirs.phis <= phi + d_phi + eps))[0]
    return rows, cols


def aggregate_window(los_map: LosMap, theta: float, phi: float, d_theta: float = 10.0, d_phi: float = 10.0) -> set:
    if d_theta < 0 or d_phi < 0:
        raise ValueError("window half-widths must be >= 0")
    rows, cols = _angle_members(los_map.dirs, theta, phi, d_theta, d_phi)
    hits = los_map.hits[np.ix_(rows, cols)].ravel()
    return {int(h) for h in hits if h != NO_HIT}


@dataclass
class LosMask:
    query: Tuple[Tuple[float, float, float], float, float]
    los_voxels: list
    binary_mask: np.ndarray  # (K,) uint8; 0 = attend, 1 = masked

    def __post_init__(self):
        zeros = np.flatnonzero(self.binary_mask == 0).tolist()
        if zeros != list(self.los_voxels):
            raise ValueError("binary mask disagrees with los_voxels")


def _nearest_first(voxels: Sequence[int], rx, grid: VoxelGrid, n_max: int) -> list:
    vox = sorted(set(int(v) for v in voxels))
    if len(vox) <= n_max:
        return vox
    dist = np.linalg.norm(grid.centers[vox] - np.asarray(rx, dtype=float), axis=1)
    order = np.lexsort((np.asarray(vox), dist))  # distance, then index
    return sorted(vox[i] for i in order[:n_max])


def build_mask(voxels, rx, grid: VoxelGrid, n_max: int = 16, theta: float = float("nan"),
               phi: float = float("nan")) -> LosMask:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    kept = _nearest_first(voxels, rx, grid, n_max)
    mask = np.ones(len(grid), dtype=np.uint8)
    mask[kept] = 0
    return LosMask((tuple(float(v) for v in rx), theta, phi), kept, mask)


def query_mask(los_map: LosMap, grid: VoxelGrid, theta: float, phi: float, d_theta: float = 10.0,
               d_phi: float = 10.0, n_max: int = 16) -> LosMask:
    voxels = aggregate_window(los_map, theta, phi, d_theta, d_phi)
    return build_mask(voxels, los_map.rx_position, grid, n_max, theta, phi)


def window_members(dirs: DirectionGrid, d_theta: float = 10.0, d_phi: float = 10.0) -> np.ndarray:
    """Flat direction indices inside each grid direction's window, padded with -1."""
    theta, phi = dirs.angles()
    members = []
    for th, ph in zip(theta, phi):
        rows, cols = _angle_members(dirs, th, ph, d_theta, d_phi)
        members.append((rows[:, None] * dirs.n_theta + cols[None, :]).ravel())
    width = max(len(m) for m in members)
    out = np.full((len(members), width), -1, dtype=np.int64)
    for i, m in enumerate(members):
        out[i, :len(m)] = m
    return out


def query_supports(los_map: LosMap, grid: VoxelGrid, d_theta: float = 10.0, d_phi: float = 10.0,
                   n_max: int = 16, members: Optional[np.ndarray] = None) -> np.ndarray:
    """Attendable voxels for every grid direction of one receiver.

    Vectorised equivalent of ``query_mask`` over the whole grid: row ``q``
    holds the ascending voxel indices of the mask for flat direction ``q``,
    padded with -1 to width ``n_max``.
    """
    if members is None:
        members = window_members(los_map.dirs, d_theta, d_phi)
    flat = los_map.hits.ravel()
    cand = np.where(members >= 0, flat[np.maximum(members, 0)], NO_HIT)
    big = np.iinfo(np.int64).max
    cand = np.sort(np.where(cand >= 0, cand, big), axis=1)
    dup = np.zeros_like(cand, dtype=bool)
    dup[:, 1:] = cand[:, 1:] == cand[:, :-1]
    cand[dup] = big
    cand = np.sort(cand, axis=1)
    real = cand != big
    if real.sum(axis=1).max(initial=0) > n_max:
        centers = grid.centers
        dist = np.full(cand.shape, np.inf)
        dist[real] = np.linalg.norm(centers[cand[real]] - los_map.rx_position, axis=1)
        # cand is index-sorted, so a stable sort on distance breaks ties by index
        order = np.argsort(dist, axis=1, kind="stable")[:, :n_max]
        cand = np.sort(np.take_along_axis(cand, order, axis=1), axis=1)
        real = cand != big
    width = cand.shape[1]
    if width < n_max:
        cand = np.concatenate([cand, np.full((len(cand), n_max - width), big)], axis=1)
    cand = cand[:, :n_max]
    return np.where(cand == big, -1, cand)

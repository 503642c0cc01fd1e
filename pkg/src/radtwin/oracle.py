"""Ground-truth channel simulator for shoebox rooms.

Specular wall reflections via the image method, with furniture boxes acting
as occluders only. Each path is a complex phasor; directional received power
is the coherent sum over paths falling inside a hard receive cone.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Sequence

import numpy as np

from .emrt import DirectionGrid
from .scene import Scene

SPEED_OF_LIGHT = 299_792_458.0


class DegenerateGeometry(ValueError):
    pass


@dataclass
class OracleConfig:
    frequency: float = 3.5e9
    max_order: int = 2
    reflection_coeff: float = 0.6
    beamwidth: float = 10.0
    tx_amplitude: float = 1.0
    floor_db: float = 250.0

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PathComponent:
    delta_A: float
    delta_psi: float
    arrival_dir: np.ndarray  # unit vector from the receiver back along the incoming ray
    path_length: float
    bounce_count: int
    walls: tuple = ()


@dataclass
class SpatialSpectrum:
    values: np.ndarray  # (n_phi, n_theta) linear power
    rx_position: np.ndarray
    scene_id: str = ""


# wall w: axis w // 2, at 0 if w is even else room_dims[axis]
def _wall_plane(wall: int, room) -> tuple:
    axis = wall // 2
    return axis, (0.0 if wall % 2 == 0 else float(room[axis]))


def _reflect(p: np.ndarray, wall: int, room) -> np.ndarray:
    axis, off = _wall_plane(wall, room)
    q = p.copy()
    q[axis] = 2.0 * off - q[axis]
    return q


def _segment_blocked(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> bool:
    """True if the open segment a->b passes through the interior of any box."""
    if len(lo) == 0:
        return False
    d = b - a
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - a) / d
        t2 = (hi - a) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    flat = d == 0
    if np.any(flat):
        inside = (a > lo) & (a < hi)
        tmin = np.where(flat, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(flat, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = np.maximum(tmin.max(axis=1), 0.0)
    t_exit = np.minimum(tmax.min(axis=1), 1.0)
    return bool(np.any(t_enter < t_exit))


def wall_sequences(max_order: int):
    """Ordered wall sequences without immediate repeats, shortest first."""
    for n in range(max_order + 1):
        for seq in itertools.product(range(6), repeat=n):
            if all(seq[i] != seq[i + 1] for i in range(n - 1)):
                yield seq


def trace_paths(scene: Scene, rx, max_order: int = 2, frequency: float = 3.5e9,
                reflection_coeff: float = 0.6) -> List[PathComponent]:
    rx = np.asarray(rx, dtype=float)
    tx = np.asarray(scene.tx_position, dtype=float)
    room = np.asarray(scene.room_dims, dtype=float)
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    if np.allclose(rx, tx, rtol=0.0, atol=1e-12):
        raise DegenerateGeometry("degenerate geometry: rx coincides with tx")
    if np.any(rx < 0) or np.any(rx > room):
        raise ValueError("receiver outside the room")
    lam = SPEED_OF_LIGHT / frequency
    lo = np.array([o.min_corner for o in scene.obstacles], dtype=float).reshape(-1, 3)
    hi = np.array([o.max_corner for o in scene.obstacles], dtype=float).reshape(-1, 3)

    paths = []
    for seq in wall_sequences(max_order):
        images = [tx]
        for w in seq:
            images.append(_reflect(images[-1], w, room))
        # walk back from the receiver through the reflection points
        points = [rx]
        ok = True
        cur = rx
        for w, img in zip(reversed(seq), reversed(images[1:])):
            axis, off = _wall_plane(w, room)
            denom = img[axis] - cur[axis]
            if denom == 0:
                ok = False
                break
            s = (off - cur[axis]) / denom
            if not 0.0 < s < 1.0:
                ok = False
                break
            hit = cur + s * (img - cur)
            hit[axis] = off
            others = [a for a in range(3) if a != axis]
            if np.any(hit[others] < 0) or np.any(hit[others] > room[others]):
                ok = False
                break
            points.append(hit)
            cur = hit
        if not ok:
            continue
        points.append(tx)
        if any(_segment_blocked(points[i], points[i + 1], lo, hi) for i in range(len(points) - 1)):
            continue
        length = float(np.linalg.norm(images[-1] - rx))
        arrival = points[1] - rx
        arrival = arrival / np.linalg.norm(arrival)
        paths.append(PathComponent(
            delta_A=lam / (4.0 * math.pi * length) * reflection_coeff ** len(seq),
            delta_psi=(2.0 * math.pi * length / lam) % (2.0 * math.pi),
            arrival_dir=arrival,
            path_length=length,
            bounce_count=len(seq),
            walls=tuple(seq),
        ))
    return paths


def render_spectrum(paths: Sequence[PathComponent], dirs: DirectionGrid = DirectionGrid(),
                    tx_amplitude: float = 1.0, beamwidth: float = 10.0, tx_phase: float = 0.0,
                    rx_position=None, scene_id: str = "") -> SpatialSpectrum:
    if beamwidth <= 0:
        raise ValueError("beamwidth must be positive")
    grid_vecs = dirs.vectors()  # (Q, 3)
    y = np.zeros(len(grid_vecs), dtype=complex)
    if paths:
        arr = np.stack([p.arrival_dir for p in paths])
        phasor = tx_amplitude * np.array([p.delta_A for p in paths]) * np.exp(
            1j * (tx_phase + np.array([p.delta_psi for p in paths])))
        cos_sep = np.clip(grid_vecs @ arr.T, -1.0, 1.0)
        inside = np.degrees(np.arccos(cos_sep)) <= beamwidth / 2.0 + 1e-9
        y = inside.astype(float) @ phasor
    power = np.abs(y) ** 2
    return SpatialSpectrum(power.reshape(dirs.shape), np.asarray(rx_position) if rx_position is not None else None,
                           scene_id)


def path_loss_db(spectrum, floor_db: float = 250.0) -> np.ndarray:
    psi = np.asarray(getattr(spectrum, "values", spectrum), dtype=float)
    out = np.full(psi.shape, float(floor_db))
    pos = psi > 0
    out[pos] = -10.0 * np.log10(psi[pos])
    return out


def power_from_db(loss_db) -> np.ndarray:
    return 10.0 ** (-np.asarray(loss_db, dtype=float) / 10.0)


def rx_spectrum(scene: Scene, rx, config: OracleConfig, dirs: DirectionGrid = DirectionGrid()) -> SpatialSpectrum:
    paths = trace_paths(scene, rx, config.max_order, config.frequency, config.reflection_coeff)
    return render_spectrum(paths, dirs, config.tx_amplitude, config.beamwidth, rx_position=rx, scene_id=scene.id)


def scene_path_loss(scene: Scene, rx_positions, config: OracleConfig, dirs: DirectionGrid = DirectionGrid(),
                    workers: int = 0) -> np.ndarray:
    """Path loss (dB) for many receivers, shape (n_rx, n_phi, n_theta).

    Results do not depend on ``workers``; 0 reads ``RADTWIN_THREADS``.
    """
    if workers <= 0:
        workers = int(os.environ.get("RADTWIN_THREADS", "1") or 1)

    def one(rx):
        return path_loss_db(rx_spectrum(scene, rx, config, dirs), config.floor_db)

    rx_positions = np.asarray(rx_positions, dtype=float).reshape(-1, 3)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, rx_positions))
    else:
        out = [one(rx) for rx in rx_positions]
    return np.stack(out) if out else np.zeros((0,) + dirs.shape)

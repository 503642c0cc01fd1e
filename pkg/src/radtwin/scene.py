"""Procedural indoor scenes: a shoebox room with axis-aligned furniture boxes.

Coordinates are meters with the room spanning ``[0, W] x [0, H] x [0, D]``
along x, y, z (z up). Obstacles stand on the floor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

KINDS = ("table", "chair", "shelf", "cabinet")

# (x-extent, y-extent, height) ranges in meters for each furniture kind
DEFAULT_SIZE_RANGES = {
    "table": ((1.0, 1.6), (0.6, 0.9), (0.72, 0.78)),
    "chair": ((0.45, 0.55), (0.45, 0.55), (0.8, 1.0)),
    "shelf": ((0.8, 1.2), (0.3, 0.45), (1.6, 2.2)),
    "cabinet": ((0.5, 1.0), (0.4, 0.6), (0.9, 1.4)),
}


class SceneGenerationError(RuntimeError):
    pass


class InvalidDisplacement(ValueError):
    pass


@dataclass(frozen=True)
class BoxObstacle:
    min_corner: Tuple[float, float, float]
    max_corner: Tuple[float, float, float]
    kind: str = "table"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise ValueError("min_corner must be < max_corner componentwise")

    def contains(self, p, strict: bool = True) -> bool:
        lo, hi = np.asarray(self.min_corner), np.asarray(self.max_corner)
        p = np.asarray(p, dtype=float)
        if strict:
            return bool(np.all(p > lo) and np.all(p < hi))
        return bool(np.all(p >= lo) and np.all(p <= hi))

    def translated(self, delta) -> "BoxObstacle":
        d = [float(v) for v in delta]
        return BoxObstacle(
            tuple(a + b for a, b in zip(self.min_corner, d)),
            tuple(a + b for a, b in zip(self.max_corner, d)),
            self.kind,
        )


@dataclass(frozen=True)
class Scene:
    id: str
    room_dims: Tuple[float, float, float]
    obstacles: Tuple[BoxObstacle, ...]
    tx_position: Tuple[float, float, float]
    layout_seed: int

    def __post_init__(self):
        if not all(d > 0 for d in self.room_dims):
            raise ValueError("room_dims must be strictly positive")
        for ob in self.obstacles:
            if not box_inside_room(ob, self.room_dims):
                raise ValueError(f"obstacle {ob} leaves the room")
            if ob.contains(self.tx_position, strict=False):
                raise ValueError("obstacle contains the TX position")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "room_dims": list(self.room_dims),
            "obstacles": [
                {"min_corner": list(o.min_corner), "max_corner": list(o.max_corner), "kind": o.kind}
                for o in self.obstacles
            ],
            "tx_position": list(self.tx_position),
            "layout_seed": int(self.layout_seed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            id=str(d["id"]),
            room_dims=tuple(float(v) for v in d["room_dims"]),
            obstacles=tuple(
                BoxObstacle(tuple(map(float, o["min_corner"])), tuple(map(float, o["max_corner"])), o["kind"])
                for o in d["obstacles"]
            ),
            tx_position=tuple(float(v) for v in d["tx_position"]),
            layout_seed=int(d["layout_seed"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_json(Path(path).read_text())

    def inside_obstacle(self, p) -> bool:
        return any(o.contains(p, strict=True) for o in self.obstacles)


@dataclass
class SceneConfig:
    room_dims: Tuple[float, float, float] = (6.0, 4.0, 2.5)
    n_obstacles: Tuple[int, int] = (5, 9)
    kind_weights: Tuple[float, ...] = (0.3, 0.3, 0.2, 0.2)
    size_ranges: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_RANGES))
    # None -> room corner offset inward by 0.5 m at height 2.0 m
    tx_position: Optional[Tuple[float, float, float]] = None
    tx_clearance: float = 0.3
    allow_overlap: bool = False
    max_retries: int = 1000
    grid_step: float = 0.01

    def resolved_tx(self) -> Tuple[float, float, float]:
        if self.tx_position is not None:
            return tuple(float(v) for v in self.tx_position)
        return default_tx_position(self.room_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_ranges"] = {k: [list(r) for r in v] for k, v in self.size_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "size_ranges" in d:
            d["size_ranges"] = {k: tuple(tuple(r) for r in v) for k, v in d["size_ranges"].items()}
        for key in ("room_dims", "n_obstacles", "kind_weights", "tx_position"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def default_tx_position(room_dims) -> Tuple[float, float, float]:
    return (0.5, 0.5, min(2.0, float(room_dims[2]) - 0.25))


def box_inside_room(box: BoxObstacle, room_dims) -> bool:
    lo, hi = np.asarray(box.min_corner), np.asarray(box.max_corner)
    return bool(np.all(lo >= 0.0) and np.all(hi <= np.asarray(room_dims, dtype=float)))


def _boxes_overlap(a: BoxObstacle, b: BoxObstacle) -> bool:
    return all(a.min_corner[i] < b.max_corner[i] and b.min_corner[i] < a.max_corner[i] for i in range(3))


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Draw a furniture layout. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    room = np.asarray(config.room_dims, dtype=float)
    if np.any(room <= 0):
        raise ValueError("room_dims must be strictly positive")
    tx = np.asarray(config.resolved_tx(), dtype=float)
    lo_n, hi_n = config.n_obstacles
    n = int(rng.integers(lo_n, hi_n + 1))
    weights = np.asarray(config.kind_weights, dtype=float)
    weights = weights / weights.sum()
    q = config.grid_step

    placed: List[BoxObstacle] = []
    for _ in range(n):
        for _attempt in range(config.max_retries):
            kind = KINDS[int(rng.choice(len(KINDS), p=weights))]
            (sx_lo, sx_hi), (sy_lo, sy_hi), (h_lo, h_hi) = config.size_ranges[kind]
            size = np.array([rng.uniform(sx_lo, sx_hi), rng.uniform(sy_lo, sy_hi), rng.uniform(h_lo, h_hi)])
            if rng.random() < 0.5:
                size[[0, 1]] = size[[1, 0]]
            size = np.minimum(np.round(size / q) * q, room)
            x0 = np.round(rng.uniform(0.0, room[0] - size[0]) / q) * q
            y0 = np.round(rng.uniform(0.0, room[1] - size[1]) / q) * q
            lo = np.array([x0, y0, 0.0])
            hi = np.minimum(lo + size, room)
            lo = np.round(lo, 10)
            hi = np.round(hi, 10)
            cand = BoxObstacle(tuple(map(float, lo)), tuple(map(float, hi)), kind)
            if np.all(tx > lo - config.tx_clearance) and np.all(tx < hi + config.tx_clearance):
                continue
            if not config.allow_overlap and any(_boxes_overlap(cand, b) for b in placed):
                continue
            placed.append(cand)
            break
        else:
            raise SceneGenerationError(
                f"scene generation failed: could not place obstacle {len(placed)} after {config.max_retries} tries"
            )

    return Scene(
        id=f"scene-{seed:04d}",
        room_dims=tuple(float(v) for v in room),
        obstacles=tuple(placed),
        tx_position=tuple(float(v) for v in tx),
        layout_seed=int(seed),
    )


def move_obstacle(scene: Scene, index: int, delta: Sequence[float]) -> Scene:
    if not 0 <= index < len(scene.obstacles):
        raise IndexError(f"obstacle index {index} out of range")
    moved = scene.obstacles[index].translated(delta)
    if not box_inside_room(moved, scene.room_dims):
        raise InvalidDisplacement(f"invalid displacement {tuple(delta)}: obstacle {index} would leave the room")
    if moved.contains(scene.tx_position, strict=False):
        raise InvalidDisplacement(f"invalid displacement {tuple(delta)}: obstacle {index} would cover the TX")
    obstacles = list(scene.obstacles)
    obstacles[index] = moved
    return replace(scene, id=f"{scene.id}~mv{index}", obstacles=tuple(obstacles))


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    source_scene: str
    face_ids: Optional[np.ndarray] = None  # index into scene_faces(scene)

    def __len__(self):
        return len(self.points)

    def save(self, path) -> None:
        pts = np.ascontiguousarray(self.points, dtype="<f4")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(pts)))
            fh.write(pts.tobytes())

    @classmethod
    def load(cls, path, source_scene: str = "") -> "PointCloud":
        raw = Path(path).read_bytes()
        (count,) = struct.unpack_from("<Q", raw, 0)
        pts = np.frombuffer(raw, dtype="<f4", offset=8, count=3 * count).reshape(count, 3)
        return cls(pts.astype(np.float64), source_scene)


@dataclass(frozen=True)
class Face:
    """Axis-aligned rectangle: ``axis`` is the normal axis, fixed at ``offset``."""

    axis: int
    offset: float
    lo: Tuple[float, float]
    hi: Tuple[float, float]
    owner: int  # -1 for the room shell, else obstacle index

    @property
    def area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])


def _box_faces(lo, hi, owner) -> List[Face]:
    faces = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for off in (lo[axis], hi[axis]):
            faces.append(Face(axis, float(off), (lo[u], lo[v]), (hi[u], hi[v]), owner))
    return faces


def scene_faces(scene: Scene) -> List[Face]:
    faces = _box_faces((0.0, 0.0, 0.0), scene.room_dims, -1)
    for i, ob in enumerate(scene.obstacles):
        faces.extend(_box_faces(ob.min_corner, ob.max_corner, i))
    return faces


def _allocate(weights: np.ndarray, n: int) -> np.ndarray:
    # largest-remainder apportionment
    quota = weights / weights.sum() * n
    counts = np.floor(quota).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def sample_point_cloud(scene: Scene, n_points: int, seed: int) -> PointCloud:
    """Stratified surface sampling: per-face counts proportional to area, uniform within a face."""
    if n_points <= 0:
        raise ValueError("n_points must be positive")
    rng = np.random.default_rng(seed)
    faces = scene_faces(scene)
    counts = _allocate(np.array([f.area for f in faces]), n_points)
    chunks, ids = [], []
    for fi, (face, c) in enumerate(zip(faces, counts)):
        if c == 0:
            continue
        u, v = [a for a in range(3) if a != face.axis]
        pts = np.empty((c, 3))
        pts[:, face.axis] = face.offset
        pts[:, u] = rng.uniform(face.lo[0], face.hi[0], c)
        pts[:, v] = rng.uniform(face.lo[1], face.hi[1], c)
        chunks.append(pts)
        ids.append(np.full(c, fi, dtype=np.int64))
    return PointCloud(np.concatenate(chunks), scene.id, np.concatenate(ids))

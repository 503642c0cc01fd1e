"""Dataset assembly: scenes, receivers, oracle path loss and cached LOS maps.

On-disk layout under a dataset directory::

    manifest.json
    scenes/<id>.json      scene geometry
    clouds/<id>.bin       u64 count + count x 3 f32 (little-endian)
    data/<id>.rtd         path-loss record, see write_record
    data/<id>.los.npy     int32 LOS hits, (n_rx, n_phi, n_theta)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .emrt import DirectionGrid, LosMap, build_los_map, query_supports, window_members
from .oracle import OracleConfig, scene_path_loss
from .scene import PointCloud, Scene, SceneConfig, generate_scene, sample_point_cloud
from .voxelgrid import VoxelGrid, voxelize

MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class DatasetConfig:
    n_scenes: int = 8
    n_rx: int = 100
    seed: int = 0
    train_ratio: float = 0.8
    angle_step: float = 10.0
    n_points: int = 25_000
    voxel_size: float = 0.5
    min_points: int = 2
    rx_max_tries: int = 10_000
    scene: SceneConfig = field(default_factory=SceneConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    @property
    def dirs(self) -> DirectionGrid:
        return DirectionGrid.from_step(self.angle_step)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        d["oracle"] = self.oracle.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        d["scene"] = SceneConfig.from_dict(d.get("scene", {}))
        d["oracle"] = OracleConfig(**d.get("oracle", {}))
        return cls(**d)


@dataclass
class Sample:
    scene_id: str
    rx_position: np.ndarray
    theta: float
    phi: float
    target: float


@dataclass
class SceneData:
    scene: Scene
    grid: VoxelGrid
    rx: np.ndarray  # (n_rx, 3), float32-representable
    loss_db: np.ndarray  # (n_rx, n_phi, n_theta) float32
    los_hits: np.ndarray  # (n_rx, n_phi, n_theta) int32

    @property
    def n_rx(self) -> int:
        return len(self.rx)

    def los_map(self, i: int, dirs: DirectionGrid) -> LosMap:
        return LosMap(self.rx[i].astype(float), self.los_hits[i].astype(np.int64), dirs)

    def supports(self, dirs: DirectionGrid, window=(10.0, 10.0), n_max: int = 16) -> np.ndarray:
        """Attendable voxels for every (rx, direction) sample, (n_rx * n_dir, n_max)."""
        members = window_members(dirs, *window)
        return np.concatenate([
            query_supports(self.los_map(i, dirs), self.grid, window[0], window[1], n_max, members)
            for i in range(self.n_rx)
        ]) if self.n_rx else np.zeros((0, n_max), dtype=np.int64)


@dataclass
class SplitManifest:
    train_scenes: List[str]
    test_scenes: List[str]

    def __post_init__(self):
        overlap = set(self.train_scenes) & set(self.test_scenes)
        if overlap:
            raise DatasetError(f"scene split overlap: {sorted(overlap)}")


def normalize_loss(loss_db, floor_db: float = 250.0) -> np.ndarray:
    """Path loss in dB to the training target in [0, 1]."""
    return np.clip(np.asarray(loss_db, dtype=float) / floor_db, 0.0, 1.0)


def sample_receivers(scene: Scene, n_rx: int, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    """Uniform receivers in the room volume, outside every obstacle and off the TX.

    Positions are rounded to float32 so the stored record reproduces them exactly.
    """
    if n_rx < 1:
        raise ValueError("n_rx must be >= 1")
    room = np.asarray(scene.room_dims, dtype=float)
    tx = np.asarray(scene.tx_position)
    out = []
    tries = 0
    while len(out) < n_rx:
        tries += 1
        if tries > max_tries:
            raise DatasetError(f"receiver sampling failed after {max_tries} tries in {scene.id}")
        p = rng.uniform(0.0, room).astype(np.float32).astype(np.float64)
        if scene.inside_obstacle(p) or np.linalg.norm(p - tx) < 1e-3:
            continue
        out.append(p)
    return np.stack(out)


def scene_grid(scene: Scene, config: DatasetConfig) -> VoxelGrid:
    cloud = sample_point_cloud(scene, config.n_points, scene.layout_seed)
    return voxelize(cloud, scene.room_dims, config.voxel_size, config.min_points)


def build_scene_data(scene: Scene, config: DatasetConfig, n_rx: Optional[int] = None,
                     rng: Optional[np.random.Generator] = None) -> SceneData:
    dirs = config.dirs
    n_rx = config.n_rx if n_rx is None else n_rx
    rng = rng if rng is not None else np.random.default_rng([config.seed, scene.layout_seed])
    grid = scene_grid(scene, config)
    rx = sample_receivers(scene, n_rx, rng, config.rx_max_tries)
    loss = scene_path_loss(scene, rx, config.oracle, dirs).astype(np.float32)
    hits = np.stack([build_los_map(p, grid, dirs).hits for p in rx]).astype(np.int32)
    return SceneData(scene, grid, rx, loss, hits)


def generate_scenes(config: DatasetConfig) -> List[Scene]:
    if config.n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    return [generate_scene(config.scene, config.seed * 1000 + i) for i in range(config.n_scenes)]


def split_scenes(scene_ids: Sequence[str], ratio: float = 0.8, seed: int = 0) -> SplitManifest:
    """Shuffle whole scenes and cut; ``ratio`` is the training fraction."""
    ids = list(scene_ids)
    if len(ids) < 2:
        raise DatasetError("need at least 2 scenes to split")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = min(max(int(round(ratio * len(ids))), 1), len(ids) - 1)
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return SplitManifest(train, test)


def scene_aware_batches(sample_scene: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Index batches drawn from one scene each.

    Samples are shuffled within every scene and cut into ``batch_size``
    chunks (the last chunk of a scene may be short); chunk order is then
    shuffled, so scenes interleave across the epoch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    sample_scene = np.asarray(sample_scene)
    batches = []
    for s in np.unique(sample_scene):
        idx = np.flatnonzero(sample_scene == s)
        idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    for b in rng.permutation(len(batches)):
        yield batches[b]


# on-disk formats

def write_record(path, scene_id: str, rx: np.ndarray, loss_db: np.ndarray, frequency: float) -> None:
    """Little-endian: u16 id length, id utf-8, u32 n_rx, u32 n_theta, u32 n_phi,
    f64 frequency; then per RX 3 f32 position and n_phi*n_theta f32 dB values
    (elevation rows, azimuth columns)."""
    n_rx, n_phi, n_theta = loss_db.shape
    raw_id = scene_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<H", len(raw_id)) + raw_id)
        fh.write(struct.pack("<IIId", n_rx, n_theta, n_phi, frequency))
        body = np.concatenate([rx.astype("<f4").reshape(n_rx, 3), loss_db.astype("<f4").reshape(n_rx, -1)], axis=1)
        fh.write(np.ascontiguousarray(body, dtype="<f4").tobytes())


def read_record(path):
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<H", raw, 0)
    scene_id = raw[2:2 + n].decode("utf-8")
    off = 2 + n
    n_rx, n_theta, n_phi, freq = struct.unpack_from("<IIId", raw, off)
    off += struct.calcsize("<IIId")
    body = np.frombuffer(raw, dtype="<f4", offset=off, count=n_rx * (3 + n_theta * n_phi)).reshape(n_rx, -1)
    rx = body[:, :3].astype(np.float64)
    loss = body[:, 3:].reshape(n_rx, n_phi, n_theta).astype(np.float32)
    return scene_id, rx, loss, freq


@dataclass
class Dataset:
    config: DatasetConfig
    scenes: Dict[str, SceneData]
    split: SplitManifest

    @property
    def dirs(self) -> DirectionGrid:
        return self.config.dirs

    def manifest(self) -> dict:
        cfg = self.config.to_dict()
        body = {
            "version": MANIFEST_VERSION,
            "scenes": [
                {"id": sid, "scene": f"scenes/{sid}.json", "cloud": f"clouds/{sid}.bin",
                 "data": f"data/{sid}.rtd", "los": f"data/{sid}.los.npy", "n_rx": sd.n_rx,
                 "layout_seed": sd.scene.layout_seed}
                for sid, sd in self.scenes.items()
            ],
            "split": {"train": self.split.train_scenes, "test": self.split.test_scenes},
            "seeds": {"dataset": self.config.seed, "split": self.config.seed},
            "config": cfg,
            "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        }
        return body

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        for sub in ("scenes", "clouds", "data"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for sid, sd in self.scenes.items():
            sd.scene.save(out / "scenes" / f"{sid}.json")
            sample_point_cloud(sd.scene, self.config.n_points, sd.scene.layout_seed).save(out / "clouds" / f"{sid}.bin")
            write_record(out / "data" / f"{sid}.rtd", sid, sd.rx, sd.loss_db, self.config.oracle.frequency)
            np.save(out / "data" / f"{sid}.los.npy", sd.los_hits)
        path = out / "manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        root = path.parent
        man = json.loads(path.read_text())
        config = DatasetConfig.from_dict(man["config"])
        scenes = {}
        for entry in man["scenes"]:
            scene = Scene.load(root / entry["scene"])
            sid, rx, loss, _freq = read_record(root / entry["data"])
            if sid != scene.id:
                raise DatasetError(f"record {entry['data']} belongs to {sid}, not {scene.id}")
            grid = scene_grid(scene, config)
            los_path = root / entry["los"]
            if los_path.exists():
                hits = np.load(los_path)
            else:
                hits = np.stack([build_los_map(p, grid, config.dirs).hits for p in rx]).astype(np.int32)
            scenes[scene.id] = SceneData(scene, grid, rx, loss, hits)
        split = SplitManifest(list(man["split"]["train"]), list(man["split"]["test"]))
        _check_split(split, scenes)
        return cls(config, scenes, split)

    def samples(self, scene_id: str) -> Iterator[Sample]:
        sd = self.scenes[scene_id]
        theta, phi = self.dirs.angles()
        target = normalize_loss(sd.loss_db.reshape(sd.n_rx, -1), self.config.oracle.floor_db)
        for i in range(sd.n_rx):
            for q in range(len(theta)):
                yield Sample(scene_id, sd.rx[i], float(theta[q]), float(phi[q]), float(target[i, q]))


def _check_split(split: SplitManifest, scenes: Dict[str, SceneData]) -> None:
    known = set(scenes)
    listed = set(split.train_scenes) | set(split.test_scenes)
    if listed != known:
        raise DatasetError("split does not cover exactly the dataset scenes")


def build_dataset(config: DatasetConfig, scenes: Optional[Sequence[Scene]] = None) -> Dataset:
    scenes = list(scenes) if scenes is not None else generate_scenes(config)
    data = {}
    for s in scenes:
        data[s.id] = build_scene_data(s, config)
    if len(data) >= 2:
        split = split_scenes(list(data), config.train_ratio, config.seed)
    else:
        split = SplitManifest(list(data), [])
    _check_split(split, data)
    return Dataset(config, data, split)

"""Training loop and held-out evaluation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import nncore as F
from .dataset import Dataset, SceneData, normalize_loss, scene_aware_batches
from .emrt import DirectionGrid
from .metrics import nmse_db, ssim
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model_kind: str = "radtwin"  # radtwin | unmasked | mlp
    epochs: int = 30
    batch_size: int = 4096
    lr: float = 1e-3
    lr_gamma: float = 0.8
    lr_every: int = 3
    seed: int = 0
    n_rx_train: Optional[int] = None  # first n receivers of each training scene
    eval_every: int = 0  # epochs between held-out NMSE evaluations, 0 = never
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return cls(**d)


@dataclass
class PreparedScene:
    """Flattened (rx, direction) samples of one scene."""

    data: SceneData
    rx: np.ndarray  # (N, 3)
    theta: np.ndarray
    phi: np.ndarray
    target: np.ndarray
    supports: np.ndarray  # (N, n_max), -1 padded

    def __len__(self):
        return len(self.target)


def prepare_scene(sd: SceneData, dirs: DirectionGrid, config: ModelConfig, floor_db: float = 250.0,
                  n_rx: Optional[int] = None) -> PreparedScene:
    n = sd.n_rx if n_rx is None else min(n_rx, sd.n_rx)
    theta, phi = dirs.angles()
    q = len(theta)
    sub = SceneData(sd.scene, sd.grid, sd.rx[:n], sd.loss_db[:n], sd.los_hits[:n])
    return PreparedScene(
        data=sub,
        rx=np.repeat(sub.rx, q, axis=0),
        theta=np.tile(theta, n),
        phi=np.tile(phi, n),
        target=normalize_loss(sub.loss_db.reshape(-1), floor_db),
        supports=sub.supports(dirs, config.window, config.n_max),
    )


@dataclass
class TrainResult:
    model: torch.nn.Module
    config: TrainConfig
    loss_curve: List[dict]
    checkpoint: Optional[Path] = None


def model_params(model: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return dict(model.named_parameters())


def save_model(model, config: TrainConfig, path) -> None:
    cfg = json.dumps(config.to_dict(), sort_keys=True)
    F.save_checkpoint(path, model_params(model), cfg)
    Path(str(path) + ".json").write_text(cfg)


def load_model(path):
    """Rebuild a model from a checkpoint and its config sidecar."""
    path = Path(path)
    cfg_text = Path(str(path) + ".json").read_text()
    config = TrainConfig.from_dict(json.loads(cfg_text))
    model = build_model(config.model_kind, config.model, config.seed)
    tensors = F.load_checkpoint(path, cfg_text)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.as_tensor(tensors[name], dtype=p.dtype))
    model.eval()
    return model, config


def train_model(dataset: Dataset, config: TrainConfig, out_dir=None, scene_ids: Optional[Sequence[str]] = None,
                eval_scene_ids: Optional[Sequence[str]] = None) -> TrainResult:
    torch.manual_seed(config.seed)
    model = build_model(config.model_kind, config.model, config.seed)
    floor = dataset.config.oracle.floor_db
    dirs = dataset.dirs
    train_ids = list(scene_ids if scene_ids is not None else dataset.split.train_scenes)
    eval_ids = list(eval_scene_ids if eval_scene_ids is not None else dataset.split.test_scenes)
    prepared = [prepare_scene(dataset.scenes[s], dirs, model.config, floor, config.n_rx_train) for s in train_ids]
    offsets = np.cumsum([0] + [len(p) for p in prepared])
    sample_scene = np.concatenate([np.full(len(p), i) for i, p in enumerate(prepared)])
    dtype = model.config.torch_dtype
    targets = [torch.as_tensor(p.target, dtype=dtype) for p in prepared]

    opt = F.adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve: List[dict] = []
    ckpt = None
    for epoch in range(1, config.epochs + 1):
        model.train()
        lr = F.step_lr(opt, epoch - 1, config.lr_gamma, config.lr_every, config.lr)
        total, count = 0.0, 0
        t0 = time.time()
        for batch in scene_aware_batches(sample_scene, config.batch_size, rng):
            s = int(sample_scene[batch[0]])
            p = prepared[s]
            local = batch - offsets[s]
            enc = model.encode_scene(p.data.grid)
            pred = model.forward_batch(enc, p.rx[local], p.theta[local], p.phi[local], p.supports[local],
                                       training=True)
            loss = F.mse_loss(pred, targets[s][local])
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch} (scene {p.data.scene.id})")
            F.backward(loss)
            F.adam_step(opt)
            total += loss.item() * len(batch)
            count += len(batch)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / max(count, 1)}
        if config.eval_every and epoch % config.eval_every == 0 and eval_ids:
            row["val_nmse_db"] = evaluate(model, dataset, eval_ids)["median_nmse_db"]
        curve.append(row)
        log.info("epoch %d lr %.6g loss %.6g (%.1fs)", epoch, lr, row["train_loss"], time.time() - t0)
        if out is not None:
            ckpt = out / "model.ckpt"
            save_model(model, config, ckpt)
            write_loss_curve(curve, out / "loss_curve.csv")
    model.eval()
    return TrainResult(model, config, curve, ckpt)


def write_loss_curve(curve: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_nmse_db"])
        for r in curve:
            val = r.get("val_nmse_db")
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), "" if val is None else repr(val)])


def predict_scene(model, sd: SceneData, dirs: DirectionGrid, chunk: int = 8192) -> np.ndarray:
    """Normalized predictions for every receiver of a scene, (n_rx, n_phi, n_theta)."""
    model.eval()
    cfg = model.config
    prep = prepare_scene(sd, dirs, cfg)
    out = np.empty(len(prep))
    with torch.no_grad():
        enc = model.encode_scene(sd.grid)
        for s in range(0, len(prep), chunk):
            sl = slice(s, s + chunk)
            out[sl] = model.forward_batch(enc, prep.rx[sl], prep.theta[sl], prep.phi[sl], prep.supports[sl]).numpy()
    return out.reshape((sd.n_rx,) + dirs.shape)


def evaluate(model, dataset: Dataset, scene_ids: Optional[Sequence[str]] = None) -> dict:
    """Per-receiver NMSE and SSIM over held-out scenes, aggregated."""
    ids = list(scene_ids if scene_ids is not None else dataset.split.test_scenes)
    floor = dataset.config.oracle.floor_db
    nmse, ss, who = [], [], []
    for sid in ids:
        sd = dataset.scenes[sid]
        pred = predict_scene(model, sd, dataset.dirs)
        truth = normalize_loss(sd.loss_db, floor)
        for i in range(sd.n_rx):
            nmse.append(nmse_db(pred[i], truth[i]))
            ss.append(ssim(pred[i], truth[i], data_range=1.0))
            who.append([sid, i])
    return summarize(nmse, ss, who)


def summarize(nmse: Sequence[float], ss: Sequence[float], who=None) -> dict:
    nmse = np.asarray(nmse, dtype=float)
    ss = np.asarray(ss, dtype=float)
    if len(nmse) == 0:
        raise ValueError("nothing to evaluate")
    return {
        "n": int(len(nmse)),
        "median_nmse_db": float(np.median(nmse)),
        "mean_nmse_db": float(np.mean(nmse)),
        "p90_nmse_db": float(np.percentile(nmse, 90)),
        # SNR as the negated NMSE
        "median_snr_db": float(-np.median(nmse)),
        "median_ssim": float(np.median(ss)),
        "mean_ssim": float(np.mean(ss)),
        "p90_ssim": float(np.percentile(ss, 90)),
        "per_rx": {"nmse_db": nmse.tolist(), "ssim": ss.tolist(), "index": who or []},
    }

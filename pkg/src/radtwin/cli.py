"""Command-line entry point: gen, train, eval, render, trace."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


def _write_resolved(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    body = {"command": command, **resolved}
    (out / "resolved_config.json").write_text(json.dumps(body, indent=2, sort_keys=True))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _load_dataset(root):
    from .dataset import Dataset

    root = Path(root)
    _require(root / "manifest.json" if root.is_dir() or not root.suffix else root, "dataset manifest")
    return Dataset.load(root)


def cmd_gen(args) -> int:
    from .dataset import DatasetConfig, build_dataset

    cfg = _load_config(args.config).get("dataset", {})
    for key, val in (("n_scenes", args.scenes), ("n_rx", args.rx), ("seed", args.seed)):
        if val is not None:
            cfg[key] = val
    oracle = dict(cfg.get("oracle", {}))
    if args.max_order is not None:
        oracle["max_order"] = args.max_order
    if args.beamwidth is not None:
        oracle["beamwidth"] = args.beamwidth
    cfg["oracle"] = oracle
    try:
        config = DatasetConfig.from_dict(cfg)
    except TypeError as e:
        raise ConfigError(f"bad dataset config: {e}") from None
    if config.n_scenes < 1 or config.n_rx < 1:
        raise ConfigError("--scenes and --rx must be >= 1")
    out = Path(args.out)
    _write_resolved(out, "gen", {"dataset": config.to_dict()})
    path = build_dataset(config).save(out)
    print(path)
    return 0


def cmd_train(args) -> int:
    from .model import ModelConfig
    from .train import TrainConfig, train_model

    cfg = _load_config(args.config).get("train", {})
    for key, val in (("epochs", args.epochs), ("seed", args.seed), ("model_kind", args.model),
                     ("n_rx_train", args.n_rx_train), ("batch_size", args.batch_size), ("lr", args.lr)):
        if val is not None:
            cfg[key] = val
    if args.dtype is not None:
        cfg.setdefault("model", {})["dtype"] = args.dtype
    try:
        config = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}") from None
    if config.model_kind not in ("radtwin", "unmasked", "mlp"):
        raise ConfigError(f"unknown model kind {config.model_kind!r}")
    if config.epochs < 1:
        raise ConfigError("--epochs must be >= 1")
    ds = _load_dataset(args.data)
    out = Path(args.out)
    _write_resolved(out, "train", {"data": str(args.data), "train": config.to_dict()})
    result = train_model(ds, config, out)
    print(result.checkpoint)
    return 0


def _load_ckpt(path):
    from .train import load_model

    p = _require(Path(path), "checkpoint")
    _require(Path(str(p) + ".json"), "checkpoint config")
    return load_model(p)


def cmd_eval(args) -> int:
    from .train import evaluate

    ds = _load_dataset(args.data)
    model, config = _load_ckpt(args.ckpt)
    out = Path(args.out)
    _write_resolved(out, "eval", {"data": str(args.data), "ckpt": str(args.ckpt), "train": config.to_dict()})
    metrics = evaluate(model, ds)
    per_rx = metrics.pop("per_rx")
    metrics["model_kind"] = config.model_kind
    metrics["test_scenes"] = list(ds.split.test_scenes)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    with open(out / "per_rx.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "rx_index", "nmse_db", "ssim"])
        for (sid, i), n, s in zip(per_rx["index"], per_rx["nmse_db"], per_rx["ssim"]):
            w.writerow([sid, i, repr(n), repr(s)])
    print(json.dumps({k: metrics[k] for k in ("median_nmse_db", "median_ssim", "p90_ssim")}))
    return 0


def write_pgm(path, img: np.ndarray) -> tuple:
    """8-bit binary PGM, min-max scaled; returns the (lo, hi) range used."""
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros(img.shape) if hi == lo else (img - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    Path(str(path) + ".range").write_text(f"{lo!r} {hi!r}\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def cmd_render(args) -> int:
    from .dataset import normalize_loss
    from .train import predict_scene

    ds = _load_dataset(args.data)
    if args.scene not in ds.scenes:
        raise ConfigError(f"unknown scene {args.scene!r}")
    sd = ds.scenes[args.scene]
    if not 0 <= args.rx < sd.n_rx:
        raise ConfigError(f"--rx must lie in [0, {sd.n_rx})")
    out = Path(args.out)
    resolved = {"data": str(args.data), "scene": args.scene, "rx": args.rx, "ckpt": args.ckpt}
    truth = normalize_loss(sd.loss_db[args.rx], ds.config.oracle.floor_db)
    pred = None
    if args.ckpt:
        model, config = _load_ckpt(args.ckpt)
        resolved["train"] = config.to_dict()
        pred = predict_scene(model, sd, ds.dirs)[args.rx]
    _write_resolved(out, "render", resolved)
    write_pgm(out / "truth.pgm", truth)
    if pred is not None:
        write_pgm(out / "pred.pgm", pred)
        write_pgm(out / "side_by_side.pgm", np.concatenate([truth, pred], axis=1))
    theta, phi = ds.dirs.angles()
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "phi", "loss_db", "truth", "pred"])
        for q, (t, p) in enumerate(zip(theta, phi)):
            w.writerow([t, p, repr(float(sd.loss_db[args.rx].reshape(-1)[q])), repr(float(truth.reshape(-1)[q])),
                        "" if pred is None else repr(float(pred.reshape(-1)[q]))])
    print(out / "truth.pgm")
    return 0


def cmd_trace(args) -> int:
    from .dataset import DatasetConfig, scene_grid
    from .emrt import build_los_map
    from .scene import Scene

    if args.data:
        ds_root = Path(args.data)
        man = json.loads(_require(ds_root / "manifest.json", "dataset manifest").read_text())
        config = DatasetConfig.from_dict(man["config"])
        entry = {e["id"]: e for e in man["scenes"]}.get(args.scene)
        if entry is None:
            raise ConfigError(f"unknown scene {args.scene!r}")
        scene = Scene.load(ds_root / entry["scene"])
    elif args.scene_file:
        config = DatasetConfig.from_dict(_load_config(args.config).get("dataset", {}))
        scene = Scene.load(_require(Path(args.scene_file), "scene file"))
    else:
        raise ConfigError("trace needs --data/--scene or --scene-file")
    grid = scene_grid(scene, config)
    dirs = config.dirs
    out = Path(args.out)
    _write_resolved(out, "trace", {"scene": scene.id, "rx": list(args.rx), "dataset": config.to_dict()})
    try:
        los = build_los_map(np.asarray(args.rx, dtype=float), grid, dirs)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    theta, phi = dirs.angles()
    hits = los.hits.reshape(-1)
    with open(out / "los.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "phi", "voxel", "ix", "iy", "iz"])
        for t, p, k in zip(theta, phi, hits):
            cell = grid.indices[k] if k >= 0 else (-1, -1, -1)
            w.writerow([t, p, int(k), *map(int, cell)])
    if args.grid_json:
        (out / "grid.json").write_text(grid.to_json())
    print(out / "los.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="radtwin", description="Geometry-conditioned directional path loss.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen", help="generate scenes and the oracle dataset")
    common(p)
    p.add_argument("--scenes", type=int)
    p.add_argument("--rx", type=int, help="receivers per scene")
    p.add_argument("--max-order", type=int)
    p.add_argument("--beamwidth", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=["radtwin", "unmasked", "mlp"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-rx-train", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out NMSE and SSIM")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write truth/predicted spectra as PGM and CSV")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--rx", type=int, default=0, help="receiver index")
    p.add_argument("--ckpt")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("trace", help="dump the LOS map of one receiver")
    common(p)
    p.add_argument("--data")
    p.add_argument("--scene")
    p.add_argument("--scene-file")
    p.add_argument("--rx", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--grid-json", action="store_true")
    p.set_defaults(func=cmd_trace)
    return ap


def main(argv=None) -> int:
    from .train import NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

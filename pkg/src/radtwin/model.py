"""Geometry-conditioned path-loss predictor and the coordinate-only MLP baseline.

The network has three parts:

* scene encoder: per-voxel FC features from encoded voxel centers, plus a
  global feature from a strided conv3d stack over the dense feature grid;
* query embedding of receiver position and look direction;
* a cross-attention decoder from the single query token into the voxel
  features, restricted to the LOS voxels of the query.

A learned fallback row is appended to every encoding and is never masked, so
queries whose LOS set is empty still have something to attend to.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from . import nncore as F
from .emrt import DirectionGrid, LosMap, LosMask, direction_vector, query_supports
from .voxelgrid import VoxelGrid

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class EmptySceneEncoding(ValueError):
    pass


@dataclass
class ModelConfig:
    d_local: int = 32
    d_global: int = 16
    conv_channels: Tuple[int, ...] = (64, 256, 768)
    n_decoder_layers: int = 3
    n_heads: int = 1
    d_hidden: int = 128
    dropout: float = 0.1
    pe_bands_pos: int = 10
    pe_bands_dir: int = 4
    s_max: float = 1.0
    n_max: int = 16
    window: Tuple[float, float] = (10.0, 10.0)
    attention: str = "los"  # "los" or "dense" (no masking, ablation)
    fallback_token: bool = True
    clamp_grad: str = "straight_through"  # or "exact"
    dtype: str = "float64"

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        self.window = tuple(self.window)
        if self.n_heads != 1:
            raise ValueError("only single-head attention is implemented")
        if self.attention not in ("los", "dense"):
            raise ValueError(f"unknown attention mode {self.attention!r}")

    @property
    def d_voxel(self) -> int:
        return self.d_local + self.d_global

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SceneEncoding:
    voxel_features: torch.Tensor  # (K, d_local + d_global)
    grid: VoxelGrid


def normalize_position(p, origin, room_dims) -> np.ndarray:
    """Map room coordinates to [-1, 1] per axis."""
    p = np.asarray(p, dtype=float)
    return 2.0 * (p - np.asarray(origin)) / np.asarray(room_dims, dtype=float) - 1.0


def clamp_output(z: torch.Tensor, s_max: float, straight_through: bool = True) -> torch.Tensor:
    """``min(relu(z), s_max)``.

    With ``straight_through`` the backward pass treats the clamp as identity,
    so a prediction stuck above ``s_max`` (or below 0) still gets pushed
    toward its target. The forward value is unchanged.
    """
    y = torch.clamp(z, 0.0, s_max)
    if straight_through:
        return z + (y - z).detach()
    return y


def _param(*shape, dtype):
    return nn.Parameter(torch.empty(*shape, dtype=dtype))


class RadTwin(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = c = config
        dt = c.torch_dtype
        d_pos = 3 * 2 * c.pe_bands_pos
        d_dir = 3 * 2 * c.pe_bands_dir
        self.local_w = _param(c.d_local, d_pos, dtype=dt)
        self.local_b = _param(c.d_local, dtype=dt)
        chans = (c.d_local,) + c.conv_channels
        self.conv_w = nn.ParameterList([_param(o, i, 3, 3, 3, dtype=dt) for i, o in zip(chans[:-1], chans[1:])])
        self.conv_b = nn.ParameterList([_param(o, dtype=dt) for o in chans[1:]])
        self.global_w = _param(c.d_global, chans[-1], dtype=dt)
        self.global_b = _param(c.d_global, dtype=dt)
        self.query_w = _param(c.d_hidden, d_pos + d_dir, dtype=dt)
        self.query_b = _param(c.d_hidden, dtype=dt)
        self.fallback = _param(c.d_voxel, dtype=dt)
        h, dv = c.d_hidden, c.d_voxel
        self.layers = nn.ModuleList()
        for _ in range(c.n_decoder_layers):
            layer = nn.ParameterDict({
                "wq": _param(h, h, dtype=dt), "bq": _param(h, dtype=dt),
                # no key bias: it shifts every score of a query equally
                "wk": _param(h, dv, dtype=dt),
                "wv": _param(h, dv, dtype=dt), "bv": _param(h, dtype=dt),
                "wo": _param(h, h, dtype=dt), "bo": _param(h, dtype=dt),
                "ln1_g": _param(h, dtype=dt), "ln1_b": _param(h, dtype=dt),
                "w1": _param(h, h, dtype=dt), "b1": _param(h, dtype=dt),
                "w2": _param(h, h, dtype=dt), "b2": _param(h, dtype=dt),
                "ln2_g": _param(h, dtype=dt), "ln2_b": _param(h, dtype=dt),
            })
            self.layers.append(layer)
        self.head_w = _param(1, h, dtype=dt)
        self.head_b = _param(1, dtype=dt)
        self.reset_parameters(seed)
        self.dropout_gen = torch.Generator().manual_seed(seed + 1)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.startswith("ln") and leaf.endswith("_g"):
                nn.init.ones_(p)
            elif leaf.startswith("ln") and leaf.endswith("_b"):
                nn.init.zeros_(p)
            else:
                F.uniform_fan_in_(p, self._fan_in(name, p), gen)

    def _fan_in(self, name: str, p: torch.Tensor) -> int:
        if name.startswith("conv_w"):
            return int(np.prod(p.shape[1:]))
        if name.startswith("conv_b"):
            idx = int(name.split(".")[1])
            return int(np.prod(self.conv_w[idx].shape[1:]))
        if p.dim() >= 2:
            return p.shape[1]
        partner = {"local_b": self.local_w, "global_b": self.global_w, "query_b": self.query_w,
                   "head_b": self.head_w}
        if name in partner:
            return partner[name].shape[1]
        if name == "fallback":
            return self.config.d_voxel
        # decoder biases: b? pairs with w?
        layer_idx, leaf = name.split(".")[1:]
        return self.layers[int(layer_idx)]["w" + leaf[1:]].shape[1]

    def _t(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.config.torch_dtype)

    # scene encoder
    def local_features(self, grid: VoxelGrid) -> torch.Tensor:
        c = self.config
        centers = self._t(normalize_position(grid.centers, grid.origin, grid.room_dims))
        return F.relu(F.linear(F.positional_encoding(centers, c.pe_bands_pos), self.local_w, self.local_b))

    def global_feature(self, local: torch.Tensor, grid: VoxelGrid) -> torch.Tensor:
        nx, ny, nz = grid.grid_dims
        flat = torch.as_tensor((grid.indices[:, 2] * ny + grid.indices[:, 1]) * nx + grid.indices[:, 0])
        dense = torch.zeros(nz * ny * nx, local.shape[1], dtype=local.dtype).index_put((flat,), local)
        x = dense.reshape(nz, ny, nx, -1).permute(3, 0, 1, 2)  # (C, D, H, W)
        for w, b in zip(self.conv_w, self.conv_b):
            x = F.relu(F.conv3d(x, w, b, stride=2, padding=1))
        pooled = x.mean(dim=(1, 2, 3))
        return F.linear(pooled, self.global_w, self.global_b)

    def encode_scene(self, grid: VoxelGrid) -> SceneEncoding:
        if len(grid) == 0:
            raise EmptySceneEncoding("empty scene encoding: grid has no occupied voxels")
        local = self.local_features(grid)
        glob = self.global_feature(local, grid)
        feats = torch.cat([local, glob.expand(len(grid), -1)], dim=1)
        return SceneEncoding(feats, grid)

    # query path
    def embed_query(self, rx, theta, phi, grid: VoxelGrid) -> torch.Tensor:
        c = self.config
        rx = np.asarray(rx, dtype=float)
        pos = self._t(normalize_position(rx, grid.origin, grid.room_dims))
        d = self._t(direction_vector(theta, phi))
        if pos.dim() == 1 and d.dim() == 2:
            pos = pos.expand(d.shape[0], -1)
        x = torch.cat([F.positional_encoding(pos, c.pe_bands_pos), F.positional_encoding(d, c.pe_bands_dir)], -1)
        return F.linear(x, self.query_w, self.query_b)

    # decoder
    def _memory(self, enc: SceneEncoding) -> torch.Tensor:
        if self.config.fallback_token:
            return torch.cat([enc.voxel_features, self.fallback[None]], dim=0)
        return enc.voxel_features

    def decode_with_bias(self, q: torch.Tensor, memory: torch.Tensor, bias: torch.Tensor,
                         training: bool = False) -> torch.Tensor:
        """Run the decoder stack against voxel rows ``memory`` with additive ``bias``.

        ``memory`` is either shared (N, d_voxel) or per query (B, S, d_voxel).
        Keys and values are never materialised: with ``K = M Wk^T`` and
        ``V = M Wv^T + bv`` the scores are ``(Q Wk) M^T`` and, since the
        weights sum to one, the output is ``(w M) Wv^T + bv``.
        """
        c = self.config
        scale = 1.0 / np.sqrt(c.d_hidden)
        h = q
        for layer in self.layers:
            qk = F.linear(h, layer["wq"], layer["bq"]) @ layer["wk"]
            ctx = F.masked_cross_attention(qk, memory, memory, bias, scale=scale)
            a = F.linear(F.linear(ctx, layer["wv"], layer["bv"]), layer["wo"], layer["bo"])
            h = F.layer_norm(h + F.dropout(a, c.dropout, training, self.dropout_gen), layer["ln1_g"], layer["ln1_b"])
            f = F.linear(F.relu(F.linear(h, layer["w1"], layer["b1"])), layer["w2"], layer["b2"])
            h = F.layer_norm(h + F.dropout(f, c.dropout, training, self.dropout_gen), layer["ln2_g"], layer["ln2_b"])
        z = F.linear(h, self.head_w, self.head_b)[..., 0]
        return clamp_output(z, c.s_max, c.clamp_grad == "straight_through")

    def decode(self, q: torch.Tensor, enc: SceneEncoding, mask: Optional[LosMask] = None,
               training: bool = False) -> torch.Tensor:
        """Decode one query (or a batch sharing one mask) against the full encoding.

        ``mask=None`` means nothing is masked.
        """
        memory = self._memory(enc)
        K = len(enc.voxel_features)
        if mask is None or self.config.attention == "dense":
            bits = np.zeros(K, dtype=np.uint8)
        else:
            bits = np.asarray(mask.binary_mask, dtype=np.uint8)
            if len(bits) != K:
                raise ValueError(f"mask covers {len(bits)} voxels but the encoding has {K}")
        if self.config.fallback_token:
            bits = np.append(bits, 0)
        bias = F.mask_to_bias(bits, self.config.torch_dtype)
        return self.decode_with_bias(q, memory, bias, training=training)

    def decode_supports(self, q: torch.Tensor, enc: SceneEncoding, supports, training: bool = False) -> torch.Tensor:
        """Batched decode where row b may attend only to voxels ``supports[b]`` (-1 = padding).

        Equivalent to masking the full encoding but only touches the attended rows.
        """
        memory = self._memory(enc)
        K = len(enc.voxel_features)
        if self.config.attention == "dense":
            bias = torch.zeros(memory.shape[0], dtype=memory.dtype)
            return self.decode_with_bias(q, memory, bias, training=training)
        sup = torch.as_tensor(np.asarray(supports), dtype=torch.long)
        pad = sup < 0
        idx = torch.where(pad, torch.full_like(sup, K), sup)
        if self.config.fallback_token:
            idx = torch.cat([idx, torch.full((idx.shape[0], 1), K, dtype=torch.long)], dim=1)
            pad = torch.cat([pad, torch.zeros((pad.shape[0], 1), dtype=torch.bool)], dim=1)
        else:
            idx = torch.where(pad, torch.zeros_like(idx), idx)
        bias = torch.where(pad, torch.full(pad.shape, F.MASK_BIAS, dtype=memory.dtype),
                           torch.zeros(pad.shape, dtype=memory.dtype))
        return self.decode_with_bias(q, memory[idx], bias, training=training)

    def forward_batch(self, enc: SceneEncoding, rx, theta, phi, supports, training: bool = False) -> torch.Tensor:
        q = self.embed_query(rx, theta, phi, enc.grid)
        return self.decode_supports(q, enc, supports, training)

    def predict_spectrum(self, enc: SceneEncoding, los_map: LosMap, dirs: DirectionGrid = DirectionGrid()) -> np.ndarray:
        """Predicted normalized path loss over the direction grid, shape (n_phi, n_theta)."""
        c = self.config
        theta, phi = dirs.angles()
        sup = query_supports(los_map, enc.grid, c.window[0], c.window[1], c.n_max)
        with torch.no_grad():
            rx = np.broadcast_to(los_map.rx_position, (len(theta), 3))
            out = self.forward_batch(enc, rx, theta, phi, sup, training=False)
        return out.numpy().reshape(dirs.shape)


class MLPBaseline(nn.Module):
    """Four FC layers from encoded (rx, direction) to path loss. Sees no geometry."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, width: Optional[int] = None):
        super().__init__()
        self.config = c = config
        dt = c.torch_dtype
        width = width or c.d_hidden
        d_in = 3 * 2 * c.pe_bands_pos + 3 * 2 * c.pe_bands_dir
        sizes = [d_in, width, width, width, 1]
        self.weights = nn.ParameterList([_param(o, i, dtype=dt) for i, o in zip(sizes[:-1], sizes[1:])])
        self.biases = nn.ParameterList([_param(o, dtype=dt) for o in sizes[1:]])
        gen = torch.Generator().manual_seed(seed)
        for w, b in zip(self.weights, self.biases):
            F.uniform_fan_in_(w, w.shape[1], gen)
            F.uniform_fan_in_(b, w.shape[1], gen)

    def encode_scene(self, grid: VoxelGrid) -> SceneEncoding:
        # geometry is ignored; only the room frame is kept for normalization
        return SceneEncoding(torch.zeros(0, 0, dtype=self.config.torch_dtype), grid)

    def predict(self, rx, theta, phi, room_dims, origin=(0.0, 0.0, 0.0)) -> torch.Tensor:
        c = self.config
        pos = torch.as_tensor(normalize_position(rx, origin, room_dims), dtype=c.torch_dtype)
        d = torch.as_tensor(direction_vector(theta, phi), dtype=c.torch_dtype)
        if pos.dim() == 1 and d.dim() == 2:
            pos = pos.expand(d.shape[0], -1)
        x = torch.cat([F.positional_encoding(pos, c.pe_bands_pos), F.positional_encoding(d, c.pe_bands_dir)], -1)
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = F.linear(x, w, b)
            if i < n - 1:
                x = F.relu(x)
        return clamp_output(x[..., 0], c.s_max, c.clamp_grad == "straight_through")

    def forward_batch(self, enc: SceneEncoding, rx, theta, phi, supports=None, training: bool = False):
        return self.predict(rx, theta, phi, enc.grid.room_dims, enc.grid.origin)

    def predict_spectrum(self, enc: SceneEncoding, los_map: LosMap, dirs: DirectionGrid = DirectionGrid()) -> np.ndarray:
        theta, phi = dirs.angles()
        with torch.no_grad():
            out = self.forward_batch(enc, np.broadcast_to(los_map.rx_position, (len(theta), 3)), theta, phi)
        return out.numpy().reshape(dirs.shape)


def mlp_baseline(rx, theta, phi, model: MLPBaseline, room_dims, origin=(0.0, 0.0, 0.0)) -> float:
    with torch.no_grad():
        return float(model.predict(np.asarray(rx, dtype=float), np.asarray(theta), np.asarray(phi), room_dims, origin))


def build_model(kind: str, config: ModelConfig, seed: int = 0):
    """``kind`` is one of radtwin, unmasked, mlp."""
    if kind == "radtwin":
        return RadTwin(config, seed)
    if kind == "unmasked":
        return RadTwin(ModelConfig(**{**asdict(config), "attention": "dense"}), seed)
    if kind == "mlp":
        return MLPBaseline(config, seed)
    raise ValueError(f"unknown model kind {kind!r}")

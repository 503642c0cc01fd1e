"""Layer primitives, optimizer plumbing and checkpoints on top of torch autograd.

Every op here is a plain function over ``torch.Tensor`` so the model code can
be read as the math it implements. Gradients come from torch's tape; the test
suite checks each op against central finite differences.
"""

from __future__ import annotations

import hashlib
import math
import struct
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
import torch

MASK_BIAS = -1e30
CHECKPOINT_MAGIC = b"RTWNCKPT"
CHECKPOINT_VERSION = 1


class InvalidState(RuntimeError):
    pass


class EmptyAttentionSupport(ValueError):
    pass


def _as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def positional_encoding(p, L: int) -> torch.Tensor:
    """Sinusoidal encoding of the last axis: each coordinate expands to
    ``[sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``.
    """
    if L < 1:
        raise ValueError("positional encoding needs L >= 1")
    p = _as_tensor(p)
    freqs = (2.0 ** torch.arange(L, dtype=p.dtype)) * math.pi
    ang = p.unsqueeze(-1) * freqs  # (..., n, L)
    enc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., n, L, 2)
    return enc.reshape(*p.shape[:-1], p.shape[-1] * 2 * L)


def linear(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight fan-in {W.shape[1]}")
    y = x @ W.transpose(0, 1)
    return y + b if b is not None else y


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(x, 0.0)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ValueError("layer_norm: affine parameters do not match feature width")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gamma + beta


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    z = x - x.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def dropout(x: torch.Tensor, rate: float, training: bool, seed=None) -> torch.Tensor:
    """Inverted dropout. ``seed`` may be an int or a ``torch.Generator``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator().manual_seed(int(seed) if seed is not None else torch.seed())
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


def conv3d(x: torch.Tensor, kernels: torch.Tensor, bias: Optional[torch.Tensor] = None, stride: int = 1,
           padding: int = 0) -> torch.Tensor:
    """3-D cross-correlation. ``x`` is (N, C_in, D, H, W) or (C_in, D, H, W)."""
    squeeze = x.dim() == 4
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 5 or kernels.dim() != 5 or x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv3d: incompatible shapes {tuple(x.shape)} and {tuple(kernels.shape)}")
    y = torch.nn.functional.conv3d(x, kernels, bias, stride=stride, padding=padding)
    return y[0] if squeeze else y


def mask_to_bias(binary_mask, dtype=torch.float64) -> torch.Tensor:
    """Binary mask (1 = masked) to an additive attention bias."""
    m = _as_tensor(binary_mask, dtype=dtype)
    return torch.where(m != 0, torch.full_like(m, MASK_BIAS), torch.zeros_like(m))


def masked_cross_attention(q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, mask_bias: torch.Tensor,
                           return_weights: bool = False, scale: Optional[float] = None):
    """``softmax(q K^T / sqrt(d_k) + bias) V`` with masked weights forced to exactly zero.

    Shapes: ``q`` (..., d_k); ``K`` (..., N, d_k) or shared (N, d_k); ``V``
    likewise with d_v; ``mask_bias`` (..., N). Returns (..., d_v). ``scale``
    overrides ``1 / sqrt(d_k)``.
    """
    d_k = q.shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d_k)
    if K.shape[-1] != d_k or K.shape[-2] != V.shape[-2] or mask_bias.shape[-1] != K.shape[-2]:
        raise ValueError("masked_cross_attention: shape mismatch")
    masked = mask_bias <= MASK_BIAS / 2
    if bool(masked.all(dim=-1).any()):
        raise EmptyAttentionSupport("empty attention support: every position is masked")
    if K.dim() == 2:
        scores = q @ K.transpose(0, 1)
    else:
        scores = (K @ q.unsqueeze(-1)).squeeze(-1)
    logits = scores * scale + mask_bias
    any_masked = bool(masked.any())
    if any_masked:
        # masked logits are pinned, so no value stored in a masked row can leak in
        logits = torch.where(masked, torch.full_like(logits, MASK_BIAS), logits)
    w = softmax_lastdim(logits)
    if any_masked:
        w = torch.where(masked, torch.zeros_like(w), w)
        if V.dim() == 2 and masked.dim() == 1:
            # shared values: a non-finite masked row would otherwise give 0 * inf
            V = torch.where(masked.unsqueeze(-1), torch.zeros_like(V), V)
    if V.dim() == 2:
        out = w @ V
    else:
        out = (w.unsqueeze(-2) @ V).squeeze(-2)
    return (out, w) if return_weights else out


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {tuple(pred.shape)} and {tuple(target.shape)} differ")
    return ((pred - target) ** 2).mean()


def backward(loss: torch.Tensor) -> None:
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise InvalidState("backward called without a recorded forward pass")
    loss.backward()


def adam(params: Iterable[torch.Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps, foreach=True)


def adam_step(optimizer: torch.optim.Optimizer) -> None:
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def step_lr(optimizer: torch.optim.Optimizer, epoch: int, gamma: float = 0.8, every: int = 3,
            base_lr: Optional[float] = None) -> float:
    """Set the lr for the epoch following ``epoch`` completed epochs: ``base * gamma ** (epoch // every)``."""
    for group in optimizer.param_groups:
        base = base_lr if base_lr is not None else group.setdefault("initial_lr", group["lr"])
        group["lr"] = base * gamma ** (epoch // every)
    return optimizer.param_groups[0]["lr"]


def uniform_fan_in_(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.copy_(torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 * bound - bound)
    return t


def config_hash(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()


def save_checkpoint(path, params: Dict[str, torch.Tensor], config_json: str) -> None:
    """Little-endian: magic, u32 version, 32-byte config hash, u32 count, then
    per parameter (u16 name length, name, u8 ndim, u32 dims..., f64 payload)."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += config_hash(config_json)
    buf += struct.pack("<I", len(params))
    for name, t in params.items():
        arr = t.detach().cpu().to(torch.float64).numpy()
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, config_json: Optional[str] = None) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = raw[12:44]
    if config_json is not None and digest != config_hash(config_json):
        raise ValueError(f"{path}: checkpoint was written for a different model config")
    (count,) = struct.unpack_from("<I", raw, 44)
    off = 48
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out

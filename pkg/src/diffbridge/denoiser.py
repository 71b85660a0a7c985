"""Time-conditioned 1D U-Net predicting the effective noise of a bridged latent.

Layout per level i (width ``base_width * 2**i``):

    encoder:  2 residual TDNN blocks, then a stride-2 conv down (all but the deepest level)
    decoder:  [nearest x2 + conv up, concat skip, 1x1 merge] (all but the deepest level),
              FiLM from the time embedding, 2 residual TDNN blocks

The guidance track, when enabled, is an extra input channel of the first conv.
Gradients come from torch autograd; ``backward`` exposes them per named parameter.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_MAGIC = b"VBCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    latent_channels: int = 32
    base_width: int = 32
    num_levels: int = 3
    time_embed_dim: int = 64
    guidance_enabled: bool = False
    dilations: tuple = (1, 2)
    kernel_size: int = 3

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        for name in ("latent_channels", "base_width", "num_levels", "time_embed_dim", "kernel_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def in_channels(self) -> int:
        return self.latent_channels + int(self.guidance_enabled)

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    @property
    def frame_multiple(self) -> int:
        return 2 ** (self.num_levels - 1)


def time_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding with interleaved components [sin(t w_0), cos(t w_0), sin(t w_1), ...].

    Frequencies are w_i = 10000 ** (-i / (dim / 2)). Accepts a scalar or a 1-D batch of steps.
    """
    if dim % 2:
        raise ValueError("dim must be even")
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.reshape(-1, 1) * freqs
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(-1, dim)
    return emb[0] if t.ndim == 0 else emb


class TDNNBlock(nn.Module):
    """x + conv1x1(silu(dilated_conv(silu(x))))."""

    def __init__(self, width: int, dilation: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(width, width, kernel_size, dilation=dilation, padding=dilation * (kernel_size // 2))
        self.proj = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.proj(F.silu(self.conv(F.silu(x))))


class FiLM(nn.Module):
    def __init__(self, cond_dim: int, width: int):
        super().__init__()
        self.scale = nn.Linear(cond_dim, width)
        self.shift = nn.Linear(cond_dim, width)

    def forward(self, h, cond):
        return (1 + self.scale(cond)).unsqueeze(-1) * h + self.shift(cond).unsqueeze(-1)


class DownLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, level: int):
        super().__init__()
        w = cfg.width(level)
        self.blocks = nn.ModuleList(TDNNBlock(w, d, cfg.kernel_size) for d in cfg.dilations)
        self.down = nn.Conv1d(w, cfg.width(level + 1), 3, stride=2, padding=1) if level < cfg.num_levels - 1 else None


class UpLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, level: int):
        super().__init__()
        w = cfg.width(level)
        deepest = level == cfg.num_levels - 1
        self.up = None if deepest else nn.Conv1d(cfg.width(level + 1), w, 3, padding=1)
        self.merge = None if deepest else nn.Conv1d(2 * w, w, 1)
        self.film = FiLM(cfg.time_embed_dim, w)
        self.blocks = nn.ModuleList(TDNNBlock(w, d, cfg.kernel_size) for d in cfg.dilations)


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        e = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.inp = nn.Conv1d(config.in_channels, config.base_width, 3, padding=1)
        self.encoder = nn.ModuleList(DownLevel(config, i) for i in range(config.num_levels))
        self.decoder = nn.ModuleList(UpLevel(config, i) for i in range(config.num_levels))
        self.out = nn.Conv1d(config.base_width, config.latent_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        """``x`` is (B, in_channels, L) with L divisible by ``config.frame_multiple``."""
        temb = time_embedding(t, self.config.time_embed_dim).to(x.dtype)
        if temb.ndim == 1:
            temb = temb.expand(x.shape[0], -1)
        cond = F.silu(self.time_mlp(temb))

        h = self.inp(x)
        skips = []
        for level in self.encoder:
            for block in level.blocks:
                h = block(h)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)
        for i in reversed(range(self.config.num_levels)):
            level = self.decoder[i]
            if level.up is not None:
                h = level.up(F.interpolate(h, scale_factor=2, mode="nearest"))
                h = level.merge(torch.cat([h, skips[i]], dim=1))
            h = level.film(h, cond)
            for block in level.blocks:
                h = block(h)
        return self.out(F.silu(h))


def _film_shift(name: str) -> bool:
    return ".film.shift." in name


def init_params(config: DenoiserConfig, seed: int, dtype=torch.float32) -> Denoiser:
    """Deterministic fan-in-scaled uniform init; FiLM shift projections start at zero."""
    model = Denoiser(config).to(dtype)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        weights = dict(model.named_parameters())
        for name, p in model.named_parameters():
            if _film_shift(name):
                p.zero_()
                continue
            w = weights[name.rsplit(".", 1)[0] + ".weight"]
            fan_in = w.shape[1] * (w.shape[2] if w.ndim == 3 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=g).to(dtype))
    return model


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _prepare_input(model: Denoiser, z_in, guidance):
    cfg = model.config
    z = torch.as_tensor(z_in)
    z = z.to(next(model.parameters()).dtype)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.unsqueeze(0)
    if z.ndim != 3 or z.shape[1] != cfg.latent_channels:
        raise ValueError(f"expected latent (B, {cfg.latent_channels}, L), got {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise ValueError("non-finite values in denoiser input")
    if guidance is not None and not cfg.guidance_enabled:
        raise ValueError("guidance supplied to a model built without a guidance channel")
    if cfg.guidance_enabled:
        if guidance is None:
            g = torch.zeros(z.shape[0], 1, z.shape[2], dtype=z.dtype)
        else:
            g = torch.as_tensor(guidance).to(z.dtype)
            if g.ndim == 1:
                g = g.unsqueeze(0)
            g = g.expand(z.shape[0], -1) if g.shape[0] == 1 else g
            if g.shape != (z.shape[0], z.shape[2]):
                raise ValueError(f"guidance shape {tuple(g.shape)} does not match latent frames {z.shape[2]}")
            if not torch.isfinite(g).all():
                raise ValueError("non-finite values in guidance")
            g = g.unsqueeze(1)
        z = torch.cat([z, g], dim=1)
    return z, squeeze


def forward(model: Denoiser, z_in, t, guidance=None) -> torch.Tensor:
    """Predict the effective noise for latent(s) ``z_in`` at step(s) ``t``.

    Frames are right-padded with zeros to a multiple of ``2**(num_levels-1)`` and the
    output is cropped back, so the result has the shape of ``z_in``.
    """
    x, squeeze = _prepare_input(model, z_in, guidance)
    n = x.shape[-1]
    m = model.config.frame_multiple
    pad = (-n) % m
    if pad:
        x = F.pad(x, (0, pad))
    out = model(x, t)[..., :n]
    return out[0] if squeeze else out


def backward(model: Denoiser, z_in, t, guidance, upstream):
    """Vector-Jacobian product of :func:`forward`.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` maps each parameter
    name (in enumeration order) to d<upstream, output>/d param.
    """
    z = torch.as_tensor(z_in).to(next(model.parameters()).dtype).detach().requires_grad_(True)
    out = forward(model, z, t, guidance)
    upstream = torch.as_tensor(upstream).to(out.dtype)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream gradient shape {tuple(upstream.shape)} != output {tuple(out.shape)}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(out, (*params, z), grad_outputs=upstream, allow_unused=True)
    param_grads = {
        n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads[:-1])
    }
    return param_grads, grads[-1]


# -- checkpoint format -------------------------------------------------------------
# magic "VBCK", u8 version, u32 config-json length, config json (utf-8),
# u32 metadata-json length, metadata json, u32 parameter count, then per parameter:
# u16 name length, name, u8 ndim, ndim x u32 shape, float32 little-endian values.


def save_checkpoint(path, model: Denoiser, metadata: dict | None = None) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    params = list(model.named_parameters())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION)]
    chunks += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(meta)), meta]
    chunks.append(struct.pack("<I", len(params)))
    for name, p in params:
        encoded = name.encode()
        arr = p.detach().cpu().numpy().astype("<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, dtype=torch.float32):
    """Inverse of :func:`save_checkpoint`; returns ``(model, metadata)``."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = r.unpack("<B")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = r.unpack("<I")
    config = DenoiserConfig(**json.loads(r.take(n)))
    (n,) = r.unpack("<I")
    metadata = json.loads(r.take(n))
    model = Denoiser(config).to(dtype)
    expected = dict(model.named_parameters())
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"{path}: {count} parameters, model has {len(expected)}")
    with torch.no_grad():
        for _ in range(count):
            (n,) = r.unpack("<H")
            name = r.take(n).decode()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            if name not in expected or tuple(expected[name].shape) != tuple(shape):
                raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
            values = np.frombuffer(r.take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4").reshape(shape)
            expected[name].copy_(torch.from_numpy(values.astype(np.float32)).to(dtype))
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return model, metadata

"""Denoiser network: diffusion encoder (local features), feature-enhancement
encoder (global features), per-scale fusion and a skip-connected decoder.

Pyramid level ``i`` (1-based) always has ``i * base_channels`` channels and
spatial size ``H / 2**i x W / 2**i``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .fusion import ChannelFusion, ShallowCompensation

GLOBAL_ENCODER_KINDS = ("scan", "conv")


@dataclass
class ModelConfig:
    scales: int = 3
    base_channels: int = 8
    image_channels: int = 2
    classes: int = 1
    image_size: tuple[int, int] = (64, 64)
    time_embed_dim: int = 32
    global_encoder: str = "scan"
    use_cfm: bool = True
    use_sfcm: bool = True
    scan_chunk: int = field(default=64, repr=False)

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.scales < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")
        if self.base_channels < 1 or self.classes < 1 or self.image_channels < 1:
            raise ConfigError("base_channels, classes and image_channels must be positive")
        h, w = self.image_size
        step = 2 ** self.scales
        if h % step or w % step:
            raise ConfigError(f"image_size {h}x{w} is not divisible by 2**scales = {step}")
        if self.global_encoder not in GLOBAL_ENCODER_KINDS:
            raise ConfigError(
                f"global_encoder must be one of {GLOBAL_ENCODER_KINDS}, got {self.global_encoder!r}"
            )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be an even integer >= 2")

    @property
    def in_channels(self) -> int:
        return self.image_channels + self.classes

    def level_channels(self, i: int) -> int:
        return i * self.base_channels

    def level_shape(self, i: int, batch: int) -> tuple[int, int, int, int]:
        h, w = self.image_size
        return (batch, self.level_channels(i), h // 2**i, w // 2**i)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


def _groups(channels: int) -> int:
    for g in (4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class ResStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.norm1(self.conv1(x))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None]
        h = F.silu(h)
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


def linear_scan(u: torch.Tensor, decay: torch.Tensor, chunk: int) -> torch.Tensor:
    """``h_k = a * h_{k-1} + (1 - a) * u_k`` along the last axis, per channel.

    ``u`` is ``B x C x L``; ``decay`` holds ``a`` in (0, 1) per channel.
    Evaluated blockwise: a lower-triangular decay kernel within each chunk and
    a short sequential carry between chunks.
    """
    b, c, length = u.shape
    chunk = min(chunk, length)
    pad = (-length) % chunk
    if pad:
        u = F.pad(u, (0, pad))
    n = u.shape[-1] // chunk
    u = u.reshape(b, c, n, chunk)

    k = torch.arange(chunk, device=u.device)
    diff = (k[:, None] - k[None, :]).to(u.dtype)
    lower = (diff >= 0).to(u.dtype)
    log_a = torch.log(decay)[:, None, None]
    kernel = torch.exp(log_a * diff.clamp(min=0)) * lower * (1 - decay)[:, None, None]
    local = torch.einsum("bcnj,ckj->bcnk", u, kernel)

    carry_pow = torch.exp(log_a[:, :, 0] * (k + 1).to(u.dtype))  # C x chunk
    outs = []
    state = torch.zeros(b, c, dtype=u.dtype, device=u.device)
    for m in range(n):
        blk = local[:, :, m] + state[:, :, None] * carry_pow
        outs.append(blk)
        state = blk[:, :, -1]
    out = torch.stack(outs, dim=2).reshape(b, c, n * chunk)
    return out[..., :length]


class ScanBlock(nn.Module):
    """Long-range mixing via linear recurrences over the row-major and the
    column-major flattening of the feature map."""

    def __init__(self, channels: int, chunk: int = 64):
        super().__init__()
        self.chunk = chunk
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.in_proj = nn.Conv2d(channels, channels, 1)
        self.out_proj = nn.Conv2d(channels, channels, 1)
        self.decay_logit = nn.Parameter(torch.linspace(1.0, 4.0, channels))

    def forward(self, x):
        b, c, h, w = x.shape
        u = self.in_proj(self.norm(x))
        a = torch.sigmoid(self.decay_logit)
        rows = linear_scan(u.reshape(b, c, h * w), a, self.chunk).reshape(b, c, h, w)
        cols = linear_scan(u.transpose(2, 3).reshape(b, c, w * h), a, self.chunk)
        cols = cols.reshape(b, c, w, h).transpose(2, 3)
        return x + self.out_proj(F.silu(rows + cols))


class LocalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(cfg.in_channels, c, 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = c
        for i in range(1, cfg.scales + 1):
            self.stages.append(ResStage(prev, i * c, cfg.time_embed_dim))
            self.downs.append(nn.Conv2d(i * c, i * c, 3, stride=2, padding=1))
            prev = i * c

    def forward(self, x, temb):
        h = self.stem(x)
        levels = []
        for stage, down in zip(self.stages, self.downs):
            h = down(stage(h, temb))
            levels.append(h)
        return levels


class GlobalEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Conv2d(cfg.image_channels, c, 3, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.mixers = nn.ModuleList()
        prev = c
        for i in range(1, cfg.scales + 1):
            self.stages.append(ResStage(prev, i * c))
            self.downs.append(nn.Conv2d(i * c, i * c, 3, stride=2, padding=1))
            if cfg.global_encoder == "scan":
                self.mixers.append(ScanBlock(i * c, cfg.scan_chunk))
            else:
                self.mixers.append(nn.Identity())
            prev = i * c

    def forward(self, image):
        h = self.stem(image)
        levels = []
        for stage, down, mix in zip(self.stages, self.downs, self.mixers):
            h = mix(down(stage(h)))
            levels.append(h)
        return levels


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, s = cfg.base_channels, cfg.scales
        d = cfg.time_embed_dim
        self.mid = ResStage(s * c, s * c, d)
        self.ups = nn.ModuleDict()
        self.sfcm = nn.ModuleDict()
        self.stages = nn.ModuleDict()
        for i in range(s, 0, -1):
            if i < s:
                self.ups[str(i)] = nn.ConvTranspose2d((i + 1) * c, i * c, 2, stride=2)
            if cfg.use_sfcm and i >= 2:
                self.sfcm[str(i)] = ShallowCompensation(c, i * c)
            self.stages[str(i)] = ResStage(2 * i * c, i * c, d)
        self.head_up = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.head = nn.Conv2d(c, cfg.classes, 3, padding=1)
        self.scales = s

    def forward(self, fused, temb):
        h = None
        for i in range(self.scales, 0, -1):
            skip = fused[i - 1]
            q = self.mid(skip, temb) if i == self.scales else self.ups[str(i)](h)
            if str(i) in self.sfcm:
                q = self.sfcm[str(i)](fused[0], skip, q)
            h = self.stages[str(i)](torch.cat([q, skip], dim=1), temb)
        return self.head(F.silu(self.head_up(h)))


class CrackSegDiff(nn.Module):
    """x0-predicting denoiser conditioned on the (fused) input image."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.local_encoder = LocalEncoder(cfg)
        self.global_encoder = GlobalEncoder(cfg)
        if cfg.use_cfm:
            self.cfm = nn.ModuleList(
                ChannelFusion(cfg.level_channels(i)) for i in range(1, cfg.scales + 1)
            )
        self.decoder = Decoder(cfg)

    def _temb(self, t, batch: int, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=like.device)
        if t.dim() == 0:
            t = t.expand(batch)
        emb = timestep_embedding(t, self.cfg.time_embed_dim).to(like.dtype)
        return self.time_mlp(emb)

    def _check_pyramid(self, levels, batch: int, what: str):
        if len(levels) != self.cfg.scales:
            raise ContractError(f"{what}: expected {self.cfg.scales} levels, got {len(levels)}")
        for i, lv in enumerate(levels, start=1):
            want = self.cfg.level_shape(i, batch)
            if tuple(lv.shape) != want:
                raise ContractError(f"{what}: level {i} has shape {tuple(lv.shape)}, expected {want}")

    def _check_inputs(self, image, x_t=None):
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1] != cfg.image_channels:
            raise ContractError(
                f"image must be Bx{cfg.image_channels}xHxW, got {tuple(image.shape)}"
            )
        if tuple(image.shape[-2:]) != cfg.image_size:
            raise ContractError(f"image size {tuple(image.shape[-2:])} != configured {cfg.image_size}")
        if x_t is not None and (
            x_t.shape[0] != image.shape[0]
            or x_t.shape[1] != cfg.classes
            or x_t.shape[-2:] != image.shape[-2:]
        ):
            raise ContractError(
                f"x_t shape {tuple(x_t.shape)} is not co-registered with image {tuple(image.shape)}"
            )

    def encode_local(self, image, x_t, t):
        self._check_inputs(image, x_t)
        temb = self._temb(t, image.shape[0], image)
        levels = self.local_encoder(torch.cat([image, x_t], dim=1), temb)
        self._check_pyramid(levels, image.shape[0], "local pyramid")
        return levels

    def encode_global(self, image):
        self._check_inputs(image)
        levels = self.global_encoder(image)
        self._check_pyramid(levels, image.shape[0], "global pyramid")
        return levels

    def fuse(self, local, global_):
        if self.cfg.use_cfm:
            return [cfm(fl, fg) for cfm, fl, fg in zip(self.cfm, local, global_)]
        return [fl + fg for fl, fg in zip(local, global_)]

    def decode(self, fused, t):
        batch = fused[0].shape[0]
        self._check_pyramid(fused, batch, "fused pyramid")
        return self.decoder(fused, self._temb(t, batch, fused[0]))

    def forward(self, image, x_t, t):
        """Predict ``x0`` in [-1, 1] from the image, the noisy mask and ``t``."""
        fused = self.fuse(self.encode_local(image, x_t, t), self.encode_global(image))
        return torch.tanh(self.decode(fused, t))

    denoise = forward

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

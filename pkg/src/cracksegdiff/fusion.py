"""Gated fusion blocks: per-scale channel fusion (CFM) and shallow-feature
compensation (SFCM)."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError


class ChannelFusion(nn.Module):
    """Merge local and global features of one pyramid level.

    ``F_m  = F_g * s(conv(avg(F_g))) + F_l * s(conv(avg(F_l)))``
    ``F_m' = F_m * s(conv(avg(F_m) + max(F_m)))``

    Pooling is global (to 1x1 per channel); the resulting channel gates
    broadcast over all spatial positions.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.gate_global = nn.Conv2d(channels, channels, 1)
        self.gate_local = nn.Conv2d(channels, channels, 1)
        self.gate_spatial = nn.Conv2d(channels, channels, 1)

    def mix(self, f_local: torch.Tensor, f_global: torch.Tensor) -> torch.Tensor:
        """Channel-gated sum ``F_m`` of the two branches."""
        if f_local.shape != f_global.shape or f_local.shape[1] != self.channels:
            raise ContractError(
                f"CFM expects two tensors of shape Bx{self.channels}xHxW, "
                f"got {tuple(f_local.shape)} and {tuple(f_global.shape)}"
            )
        g = torch.sigmoid(self.gate_global(F.adaptive_avg_pool2d(f_global, 1)))
        l = torch.sigmoid(self.gate_local(F.adaptive_avg_pool2d(f_local, 1)))
        return f_global * g + f_local * l

    def forward(self, f_local: torch.Tensor, f_global: torch.Tensor) -> torch.Tensor:
        f_m = self.mix(f_local, f_global)
        pooled = F.adaptive_avg_pool2d(f_m, 1) + F.adaptive_max_pool2d(f_m, 1)
        return f_m * torch.sigmoid(self.gate_spatial(pooled))


class ShallowCompensation(nn.Module):
    """Re-inject the shallowest fused feature into a decoder stage.

    ``F_p' = F_p * s(conv3(F_f) + conv1(F_p))``
    ``F_f' = F_q * s(conv3(F_p') + conv1(F_q))``

    ``F_f`` is average-pooled to the skip resolution before its projection and
    ``F_p'`` is resized to the decoder resolution when they differ.
    """

    def __init__(self, shallow_channels: int, channels: int):
        super().__init__()
        self.shallow_proj = nn.Conv2d(shallow_channels, channels, 3, padding=1)
        self.skip_self = nn.Conv2d(channels, channels, 1)
        self.skip_proj = nn.Conv2d(channels, channels, 3, padding=1)
        self.dec_self = nn.Conv2d(channels, channels, 1)

    def gate_skip(self, f_shallow: torch.Tensor, f_skip: torch.Tensor) -> torch.Tensor:
        """``F_p'``: the skip feature gated by the shallow feature."""
        hs, ws = f_shallow.shape[-2:]
        hp, wp = f_skip.shape[-2:]
        if hs < hp or ws < wp or hs % hp or ws % wp:
            raise ContractError(
                f"SFCM cannot align shallow feature {hs}x{ws} to skip resolution {hp}x{wp}"
            )
        if (hs, ws) != (hp, wp):
            f_shallow = F.adaptive_avg_pool2d(f_shallow, (hp, wp))
        return f_skip * torch.sigmoid(self.shallow_proj(f_shallow) + self.skip_self(f_skip))

    def forward(self, f_shallow: torch.Tensor, f_skip: torch.Tensor, f_dec: torch.Tensor) -> torch.Tensor:
        if f_skip.shape[1] != f_dec.shape[1]:
            raise ContractError(
                f"SFCM skip and decoder channels differ: {f_skip.shape[1]} vs {f_dec.shape[1]}"
            )
        hp, wp = f_skip.shape[-2:]
        f_p = self.gate_skip(f_shallow, f_skip)
        if f_p.shape[-2:] != f_dec.shape[-2:]:
            hq, wq = f_dec.shape[-2:]
            if hq <= hp and wq <= wp:
                f_p = F.adaptive_avg_pool2d(f_p, (hq, wq))
            else:
                f_p = F.interpolate(f_p, size=(hq, wq), mode="bilinear", align_corners=False)
        return f_dec * torch.sigmoid(self.skip_proj(f_p) + self.dec_self(f_dec))

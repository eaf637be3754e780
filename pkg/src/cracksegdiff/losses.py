"""Mixed training objective: x0-space MSE plus supervised Dice + BCE."""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 10.0
    dice_smooth: float = 1.0
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha and beta must be >= 0")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be > 0")
        if not 0 < self.prob_clamp < 0.5:
            raise ConfigError("prob_clamp must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    _same_shape(x0_hat, x0)
    return torch.mean((x0_hat - x0) ** 2)


def to_prob(x0_hat: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Map a mask-domain prediction in [-1, 1] to a clamped probability."""
    eps = (cfg or LossConfig()).prob_clamp
    return ((x0_hat + 1) / 2).clamp(eps, 1 - eps)


def dice_bce_loss(prob: torch.Tensor, gt: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Soft Dice loss (summed over the whole batch) plus mean BCE."""
    cfg = cfg or LossConfig()
    _same_shape(prob, gt)
    if not torch.all((prob >= 0) & (prob <= 1)):  # also rejects NaN
        raise ValueError("prob must lie in [0, 1]")
    p = prob.clamp(cfg.prob_clamp, 1 - cfg.prob_clamp)
    s = cfg.dice_smooth
    dice = 1 - (2 * (p * gt).sum() + s) / (p.sum() + gt.sum() + s)
    return dice + F.binary_cross_entropy(p, gt.to(p.dtype))


def total_loss(l1, l2, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return cfg.alpha * l1 + cfg.beta * l2

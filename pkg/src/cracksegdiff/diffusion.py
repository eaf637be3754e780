"""Closed-form Gaussian diffusion arithmetic.

Timesteps are 1-based, ``t in {1..T}``, with the convention
``alpha_bar_0 := 1``.  Arrays on :class:`NoiseSchedule` are 0-based, so the
value for step ``t`` lives at index ``t - 1``.

Every function accepts numpy arrays, torch tensors or plain floats for the
data operands.  ``t`` may be a Python int (same step for the whole batch) or a
1-D integer array/tensor with one step per leading-axis element.  Noise is
always passed in explicitly; nothing here draws random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DegenerateStepError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    beta_tilde: np.ndarray
    one_minus_alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("betas must be a non-empty 1-D sequence")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        # 1 - alpha_bar without cancellation; exact enough that step 1 gives beta_1
        one_minus = -np.expm1(np.cumsum(np.log1p(-beta)))
        one_minus_prev = np.concatenate([[0.0], one_minus[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            beta_tilde = np.where(one_minus > 0, one_minus_prev / one_minus * beta, 0.0)
        arrays = (beta, alpha, alpha_bar, alpha_bar_prev, beta_tilde, one_minus)
        for arr in arrays:
            arr.setflags(write=False)
        return cls(*arrays)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear (arithmetic) beta schedule of length ``T``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_start:
        raise ConfigError(f"beta_start must be > 0, got {beta_start}")
    if not beta_start <= beta_end:
        raise ConfigError(f"beta_start ({beta_start}) must be <= beta_end ({beta_end})")
    if not beta_end < 1.0:
        raise ConfigError(f"beta_end must be < 1, got {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def respace(sched: NoiseSchedule, steps: int) -> tuple[NoiseSchedule, np.ndarray]:
    """Evenly strided sub-schedule for faster sampling.

    Returns the respaced schedule and ``timesteps`` where ``timesteps[k]`` is
    the original step index (1-based) that respaced step ``k + 1`` stands for.
    The respaced ``alpha_bar`` agrees with the original at those indices.
    """
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"steps must be in [1, {sched.T}], got {steps}")
    timesteps = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(np.int64))
    abar = sched.alpha_bar[timesteps - 1]
    prev = np.concatenate([[1.0], abar[:-1]])
    return NoiseSchedule.from_betas(1.0 - abar / prev), timesteps


def _check_t(t, T: int):
    if isinstance(t, torch.Tensor):
        lo, hi = int(t.min()), int(t.max())
    else:
        arr = np.asarray(t)
        lo, hi = int(arr.min()), int(arr.max())
    if lo < 1 or hi > T:
        raise IndexError(f"timestep out of range [1, {T}]: got {lo if lo < 1 else hi}")


def _coef(arr: np.ndarray, t, like):
    """Gather ``arr[t - 1]`` shaped to broadcast against ``like``.

    Scalar ``t`` yields a Python float so it mixes safely with tensors.
    """
    if isinstance(t, (int, np.integer)):
        return float(arr[int(t) - 1])
    if isinstance(like, torch.Tensor):
        idx = torch.as_tensor(t, device=like.device).long() - 1
        vals = torch.tensor(arr, dtype=like.dtype, device=like.device)[idx]
        return vals.reshape(-1, *([1] * (like.dim() - 1)))
    vals = arr[np.asarray(t).astype(np.int64) - 1]
    nd = np.ndim(like)
    return vals.reshape(-1, *([1] * (nd - 1))) if nd else vals


def _sqrt(v):
    if isinstance(v, torch.Tensor):
        return v.sqrt()
    if isinstance(v, float):
        return math.sqrt(v)
    return np.sqrt(v)


def q_sample(x0, t, epsilon, sched: NoiseSchedule):
    """Draw ``x_t ~ q(x_t | x_0)`` from the supplied standard-normal noise."""
    _check_t(t, sched.T)
    a = _coef(sched.alpha_bar, t, x0)
    return _sqrt(a) * x0 + _sqrt(1.0 - a) * epsilon


def q_step(x_prev, t, z, sched: NoiseSchedule):
    """One Markov forward step ``x_{t-1} -> x_t``."""
    _check_t(t, sched.T)
    b = _coef(sched.beta, t, x_prev)
    return _sqrt(1.0 - b) * x_prev + _sqrt(b) * z


def posterior_stats(x_t, x0, t, sched: NoiseSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``."""
    _check_t(t, sched.T)
    abar_prev = _coef(sched.alpha_bar_prev, t, x_t)
    alpha = _coef(sched.alpha, t, x_t)
    beta = _coef(sched.beta, t, x_t)
    one_minus = _coef(sched.one_minus_alpha_bar, t, x_t)
    c_t = _sqrt(alpha) * (1.0 - abar_prev) / one_minus
    c_0 = _sqrt(abar_prev) * beta / one_minus
    return c_t * x_t + c_0 * x0, _coef(sched.beta_tilde, t, x_t)


def _alpha_bar_checked(sched: NoiseSchedule, t, like):
    _check_t(t, sched.T)
    abar = _coef(sched.alpha_bar, t, like)
    top = float(abar.max()) if not isinstance(abar, float) else abar
    if top >= 1.0:
        raise DegenerateStepError("alpha_bar_t == 1: x0 and epsilon are not interconvertible")
    return abar


def x0_to_eps(x_t, t, x0, sched: NoiseSchedule):
    abar = _alpha_bar_checked(sched, t, x_t)
    return (x_t - _sqrt(abar) * x0) / _sqrt(1.0 - abar)


def eps_to_x0(x_t, t, epsilon, sched: NoiseSchedule):
    abar = _alpha_bar_checked(sched, t, x_t)
    return (x_t - _sqrt(1.0 - abar) * epsilon) / _sqrt(abar)


def convert_param(x_t, t, sched: NoiseSchedule, *, x0=None, epsilon=None):
    """Given exactly one of ``x0`` / ``epsilon`` at ``x_t``, return the other."""
    if (x0 is None) == (epsilon is None):
        raise TypeError("pass exactly one of x0= or epsilon=")
    if x0 is not None:
        return x0_to_eps(x_t, t, x0, sched)
    return eps_to_x0(x_t, t, epsilon, sched)


def reverse_step(x_t, epsilon_hat, t, z, sched: NoiseSchedule):
    """Ancestral step ``x_t -> x_{t-1}`` with variance fixed to beta_tilde.

    ``z`` is ignored wherever ``t == 1``.
    """
    _check_t(t, sched.T)
    alpha = _coef(sched.alpha, t, x_t)
    abar = _coef(sched.alpha_bar, t, x_t)
    bt = _coef(sched.beta_tilde, t, x_t)
    mean = (x_t - (1.0 - alpha) / _sqrt(1.0 - abar) * epsilon_hat) / _sqrt(alpha)
    if isinstance(t, (int, np.integer)):
        return mean if t == 1 else mean + _sqrt(bt) * z
    if isinstance(alpha, torch.Tensor):
        live = (torch.as_tensor(t, device=x_t.device) > 1).to(x_t.dtype).reshape(alpha.shape)
    else:
        live = (np.asarray(t) > 1).astype(np.float64).reshape(np.shape(alpha))
    return mean + live * _sqrt(bt) * z

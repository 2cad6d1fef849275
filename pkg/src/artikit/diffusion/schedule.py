"""Linear-beta DDPM schedule and the forward noising process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ParameterError, ShapeError

NOISE_MODES = ("ddpm", "interp")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t):
        """``alpha_bar`` at 1-based step(s) ``t``."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep outside [1, {self.T}]")
        return self.alpha_bars[t.astype(np.int64) - 1]


def make_noise_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars)


def forward_noise(A0, t, eps, sched: NoiseSchedule = None, mode: str = "ddpm"):
    """Noised attributes ``A_t``.

    ``t`` is a scalar or one value per row of ``A0``.  ddpm uses integer steps in
    ``[1, T]``; interp uses ``t`` in ``[0, 1]`` with ``t = 1`` the clean data.
    Works on numpy arrays and torch tensors alike.
    """
    if tuple(A0.shape) != tuple(eps.shape):
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match data shape {tuple(A0.shape)}")
    is_torch = isinstance(A0, torch.Tensor)
    t_np = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)
    if mode == "ddpm":
        if sched is None:
            raise ParameterError("ddpm mode needs a noise schedule")
        ab = sched.alpha_bar(t_np)
        a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    elif mode == "interp":
        if np.any(t_np < 0) or np.any(t_np > 1):
            raise ParameterError("interp mode needs t in [0, 1]")
        a, b = t_np, 1.0 - t_np
    else:
        raise ParameterError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")
    if np.ndim(a):
        shape = (-1,) + (1,) * (A0.ndim - 1)
        a, b = np.reshape(a, shape), np.reshape(b, shape)
    if is_torch:
        a = torch.as_tensor(a, dtype=A0.dtype)
        b = torch.as_tensor(b, dtype=A0.dtype)
    return a * A0 + b * eps

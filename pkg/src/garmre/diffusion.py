"""Noise schedule, forward process, denoising objective and deterministic DDIM sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import torch
import torch.nn.functional as F

from .errors import ConfigError, OrderError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients; index 0 of ``alpha_bar`` is the clean endpoint (1.0)."""

    T: int
    beta: torch.Tensor       # (T + 1,), beta[0] = 0 unused
    alpha_bar: torch.Tensor  # (T + 1,), alpha_bar[0] = 1

    def ab(self, t) -> torch.Tensor:
        return self.alpha_bar[torch.as_tensor(t, dtype=torch.long)]


def make_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2,
                  curve: str = "scaled_linear") -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if curve == "linear":
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif curve == "scaled_linear":
        beta = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=torch.float64) ** 2
    else:
        raise ConfigError(f"unknown schedule curve {curve!r}")
    alpha_bar = torch.cumprod(1.0 - beta, 0)
    one = torch.ones(1, dtype=torch.float64)
    return NoiseSchedule(T, torch.cat([torch.zeros(1, dtype=torch.float64), beta]),
                         torch.cat([one, alpha_bar]))


def schedule_from_config(cfg) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.schedule_curve)


def _bcast(coef: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    coef = coef.to(like.dtype)
    if coef.dim() == 0:
        return coef
    return coef.reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample z_t; ``t`` may be an int or a per-sample (B,) tensor of steps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 1).any() or (t > schedule.T).any():
        raise ConfigError(f"timestep outside [1, {schedule.T}]")
    ab = _bcast(schedule.ab(t), z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def ldm_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps_true.shape:
        raise ShapeError(f"eps_pred {tuple(eps_pred.shape)} != eps_true {tuple(eps_true.shape)}")
    return F.mse_loss(eps_pred, eps_true)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s: float) -> torch.Tensor:
    """Guided noise as s * cond + (1 - s) * uncond, written exactly in that form."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"cond {tuple(eps_cond.shape)} != uncond {tuple(eps_uncond.shape)}")
    if s < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {s}")
    return s * eps_cond + (1 - s) * eps_uncond


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending grid with stride floor(T/steps), starting at T and terminated by 0."""
    if not 1 <= steps <= T:
        raise ConfigError(f"ddim_steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [T - k * stride for k in range(steps)] + [0]


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule) -> torch.Tensor:
    if t_prev >= t:
        raise OrderError(f"t_prev ({t_prev}) must be < t ({t})")
    if t_prev < 0 or t > schedule.T:
        raise OrderError(f"timesteps out of range: t={t}, t_prev={t_prev}")
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"eps_hat {tuple(eps_hat.shape)} != z_t {tuple(z_t.shape)}")
    ab_t = schedule.alpha_bar[t].item()
    ab_prev = schedule.alpha_bar[t_prev].item()
    x0 = (z_t - (1 - ab_t) ** 0.5 * eps_hat) / ab_t ** 0.5
    return ab_prev ** 0.5 * x0 + (1 - ab_prev) ** 0.5 * eps_hat


@dataclass
class GuidanceConfig:
    scale: float = 1.5
    ddim_steps: int = 25
    seed: int = 0

    def validate(self, T: int):
        if self.scale < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.scale}")
        if not 1 <= self.ddim_steps <= T:
            raise ConfigError(f"ddim_steps must be in [1, {T}], got {self.ddim_steps}")


@dataclass
class Conditioning:
    """Pair of conditioning variants handed back to the denoiser function."""

    cond: Any
    uncond: Any


def initial_noise(latent_shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(latent_shape), generator=gen, dtype=dtype)


DenoiserFn = Callable[[torch.Tensor, int, Any], torch.Tensor]


@torch.no_grad()
def ddim_sample(denoiser_fn: DenoiserFn, conditioning: Conditioning, guidance: GuidanceConfig,
                schedule: NoiseSchedule, latent_shape, z_init: torch.Tensor | None = None) -> torch.Tensor:
    """Guided deterministic DDIM (eta = 0).

    ``denoiser_fn(z_t, t, variant)`` is called once with ``conditioning.cond`` and
    once with ``conditioning.uncond`` at every step.
    """
    guidance.validate(schedule.T)
    z = initial_noise(latent_shape, guidance.seed) if z_init is None else z_init.clone()
    grid = ddim_timesteps(schedule.T, guidance.ddim_steps)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        eps_c = denoiser_fn(z, t, conditioning.cond)
        eps_u = denoiser_fn(z, t, conditioning.uncond)
        z = ddim_step(z, cfg_combine(eps_c, eps_u, guidance.scale), t, t_prev, schedule)
    return z

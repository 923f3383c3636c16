"""Desk-scale conditional denoisers and the variance-preserving diffusion machinery."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..adapter import apply_membranes
from ..errors import ContractViolationError

TIME_FEAT_DIM = 16


def timestep_features(t: torch.Tensor, dim: int = TIME_FEAT_DIM, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape [B, dim]."""
    t = torch.as_tensor(t, dtype=dtype).flatten()
    half = dim // 2
    freqs = torch.exp(
        -math.log(1000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1)
    )
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ToyDenoiser(nn.Module):
    """Small conditional noise-prediction network over 3x8x8 images.

    Conditioning enters twice: as a channel bias and as a learned spatial map,
    so the network can render concept-specific spatial structure. Injectable
    layers (three linears, four convolutions) are the named children; their
    registration order defines the model signature.
    """

    def __init__(self, image_channels: int = 3, cond_dim: int = 28, hidden: int = 48, size: int = 8):
        super().__init__()
        self.image_channels = image_channels
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.size = size
        spatial = 4
        self.time_proj = nn.Linear(TIME_FEAT_DIM, hidden)
        self.cond_proj = nn.Linear(cond_dim, hidden)
        self.cond_spatial = nn.Linear(cond_dim, spatial * size * size)
        self.conv_in = nn.Conv2d(image_channels + spatial + 2, hidden, 3, padding=1)
        self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, image_channels, 3, padding=1)
        coords = torch.stack(
            torch.meshgrid(
                torch.linspace(-1, 1, size), torch.linspace(-1, 1, size), indexing="ij"
            )
        )
        self.register_buffer("coords", coords)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        emb = self.time_proj(timestep_features(t, dtype=x.dtype)) + self.cond_proj(cond)
        emb = emb[:, :, None, None]
        sp = self.cond_spatial(cond).view(b, -1, self.size, self.size)
        grid = self.coords.to(x.dtype).expand(b, -1, -1, -1)
        h = F.silu(self.conv_in(torch.cat([x, sp, grid], dim=1)) + emb)
        h = F.silu(self.conv_mid(h) + emb)
        h = F.silu(self.conv_mid2(h))
        return self.conv_out(h)


class MicroDenoiser(nn.Module):
    """Two-injectable-layer denoiser used for gradient checking."""

    def __init__(self, channels: int = 2, cond_dim: int = 6):
        super().__init__()
        self.image_channels = channels
        self.cond_dim = cond_dim
        self.cond_proj = nn.Linear(cond_dim, channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=x.dtype).flatten()
        h = x + self.cond_proj(cond)[:, :, None, None] + 0.1 * t[:, None, None, None]
        return self.conv(F.silu(h))


class DiffusionSchedule:
    """Linear-beta variance-preserving schedule; t runs over 0..timesteps with t=0 the identity."""

    def __init__(self, timesteps: int = 100, beta_start: float = 2e-3, beta_end: float = 0.13):
        self.timesteps = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps)
        alphas = 1.0 - self.betas
        self.alpha_bar = torch.cat([torch.ones(1), torch.cumprod(alphas, dim=0)])

    def check_t(self, t) -> None:
        t = torch.as_tensor(t)
        if torch.any(t < 0) or torch.any(t > self.timesteps):
            raise ContractViolationError(
                f"timestep out of range [0, {self.timesteps}]: {t.tolist()}"
            )

    def forward_diffuse(self, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
        self.check_t(t)
        t = torch.as_tensor(t).flatten()
        abar = self.alpha_bar[t].to(x0.dtype)
        while abar.dim() < x0.dim():
            abar = abar.unsqueeze(-1)
        return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise

    def reverse_timesteps(self, steps: int | None = None) -> list[int]:
        """Descending timestep path from T to 0, evenly strided when steps < T."""
        T = self.timesteps
        if steps is None or steps >= T:
            return list(range(T, -1, -1))
        if steps < 1:
            raise ContractViolationError(f"need at least one reverse step, got {steps}")
        ts = torch.linspace(T, 0, steps + 1).round().long().tolist()
        # ensure strictly decreasing after rounding
        out = [ts[0]]
        for v in ts[1:]:
            out.append(min(v, out[-1] - 1))
        out[-1] = 0
        return out


def _posterior_step(
    schedule: DiffusionSchedule,
    x_t: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    s: int,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Ancestral posterior from step t down to step s < t (DDPM for adjacent steps)."""
    abar_t = float(schedule.alpha_bar[t])
    abar_s = float(schedule.alpha_bar[s])
    x0_hat = (x_t - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
    var = (1.0 - abar_s) / (1.0 - abar_t) * (1.0 - abar_t / abar_s)
    mean = math.sqrt(abar_s) * x0_hat + math.sqrt(max(1.0 - abar_s - var, 0.0)) * eps
    if var <= 0:
        return mean
    return mean + math.sqrt(var) * noise


@torch.no_grad()
def reverse_sample(
    denoiser: nn.Module,
    schedule: DiffusionSchedule,
    x_t: torch.Tensor,
    t_start: int,
    cond: torch.Tensor,
    gen: torch.Generator,
    t_stop: int = 0,
    steps: int | None = None,
    active=(),
) -> torch.Tensor:
    """Run the reverse process from x at t_start down to t_stop.

    Noise draws come from `gen` in a fixed order, so runs with equal seeds are
    paired across different models/membranes.
    """
    schedule.check_t(t_start)
    schedule.check_t(t_stop)
    path = [t for t in schedule.reverse_timesteps(steps) if t_stop <= t <= t_start]
    if not path or path[0] != t_start:
        path = [t_start] + [t for t in path if t < t_start]
    x = x_t
    t_batch = torch.empty(x.shape[0])
    with apply_membranes(denoiser, active):
        for t, s in zip(path[:-1], path[1:]):
            t_batch.fill_(float(t))
            eps = denoiser(x, cond, t_batch.to(x.dtype))
            z = torch.randn(x.shape, generator=gen, dtype=x.dtype)
            x = _posterior_step(schedule, x, eps, t, s, z)
    return x


@torch.no_grad()
def sample(
    denoiser: nn.Module,
    schedule: DiffusionSchedule,
    cond: torch.Tensor,
    seed: int,
    shape: tuple[int, int] | None = None,
    steps: int | None = None,
    active=(),
    t_stop: int = 0,
) -> torch.Tensor:
    """Generate from pure noise, conditioned on `cond` [B, L]; deterministic under seed."""
    channels = getattr(denoiser, "image_channels", 3)
    hw = shape or (8, 8)
    gen = torch.Generator().manual_seed(seed)
    x_t = torch.randn(cond.shape[0], channels, hw[0], hw[1], generator=gen)
    if t_stop >= schedule.timesteps:
        return x_t
    return reverse_sample(
        denoiser, schedule, x_t, schedule.timesteps, cond, gen, t_stop=t_stop, steps=steps, active=active
    )

"""Partially-noised Gaussian forward process and its ancestral reverse step.

Noise only ever touches positions with mask 1; mask-0 positions carry the
condition and are copied through every operation bit-for-bit. All functions
are pure given an explicit ``torch.Generator``, so callers can run any number
of them concurrently on independent streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .schedule import NoiseSchedule

__all__ = ["LatentState", "PosteriorParams", "forward_noise", "posterior", "ancestral_step", "anchor"]


@dataclass
class LatentState:
    """Latent z_t with its timestep tag and condition mask."""

    z: torch.Tensor  # (..., L, d)
    t: float
    mask: torch.Tensor  # (..., L), 1 = noised region


@dataclass
class PosteriorParams:
    """Gaussian q(z_{t−1} | z_t, z_0): full mean, scalar isotropic variance."""

    mean: torch.Tensor
    var: float


def _expand_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return mask.to(torch.bool).unsqueeze(-1).expand_as(like)


def _gather_scalar(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Index a per-timestep table with scalar or per-example t, broadcast to latent shape."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        out = values[t.long()].to(like.dtype)
        return out.view(-1, *([1] * (like.dim() - 1)))
    return values[int(t)].to(like.dtype)


def forward_noise(
    z0: torch.Tensor,
    mask: torch.Tensor,
    t,
    sched: NoiseSchedule,
    generator: torch.Generator,
) -> LatentState:
    """Sample q(z_t | z_0) on masked positions; condition positions stay z0.

    ``t`` may be a python int or a per-example long tensor (leading batch dim).
    """
    ab = _gather_scalar(sched.alpha_bar, t, z0)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
    noised = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
    z = torch.where(_expand_mask(mask, z0), noised, z0)
    t_tag = float(t) if not isinstance(t, torch.Tensor) or t.dim() == 0 else float(t.max())
    return LatentState(z=z, t=t_tag, mask=mask)


def posterior(sched: NoiseSchedule, z_t: torch.Tensor, z0_hat: torch.Tensor, t: int) -> PosteriorParams:
    """q(z_{t−1} | z_t, z_0) with z_0 replaced by the estimate ``z0_hat``, t ≥ 1."""
    if t < 1:
        raise ValueError(f"posterior undefined at t={t}")
    ab_t = sched.alpha_bar[t].item()
    ab_prev = sched.alpha_bar[t - 1].item()
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t
    denom = 1.0 - ab_t
    c_zt = (alpha_t**0.5) * (1.0 - ab_prev) / denom
    c_z0 = (ab_prev**0.5) * beta_t / denom
    var = beta_t * (1.0 - ab_prev) / denom
    mean = c_zt * z_t + c_z0 * z0_hat
    return PosteriorParams(mean=mean, var=var)


def ancestral_step(
    sched: NoiseSchedule,
    state: LatentState,
    z0_hat: torch.Tensor,
    t: int,
    z_noise_temperature: float,
    generator: torch.Generator,
) -> LatentState:
    """One reverse step t → t−1 on masked positions; no noise at the terminal t=1."""
    post = posterior(sched, state.z, z0_hat, t)
    new = post.mean
    if t > 1 and z_noise_temperature != 0.0:
        eps = torch.randn(new.shape, generator=generator, dtype=new.dtype, device=new.device)
        new = new + z_noise_temperature * (post.var**0.5) * eps
    z = torch.where(_expand_mask(state.mask, new), new, state.z)
    return LatentState(z=z, t=float(t - 1), mask=state.mask)


def anchor(state: LatentState, x_embed: torch.Tensor, mask: torch.Tensor) -> LatentState:
    """Overwrite mask-0 positions with the condition embedding rows."""
    if x_embed.shape != state.z.shape:
        raise ValueError(f"shape mismatch: z {tuple(state.z.shape)} vs x_embed {tuple(x_embed.shape)}")
    z = torch.where(_expand_mask(mask, state.z), state.z, x_embed)
    return LatentState(z=z, t=state.t, mask=state.mask)

"""Noise schedule algebra for the latent diffusion process.

Everything downstream (forward noising, posteriors, the exponential-integrator
sampler) reads its coefficients from here. Arrays are kept in float64 so the
composition identities hold to machine precision; callers cast down when
applying them to float32 latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

__all__ = [
    "NoiseSchedule",
    "ScheduleParams",
    "TransitionParams",
    "make_sqrt_schedule",
    "params_at",
    "transition",
    "lambda_at",
    "t_of_lambda",
    "vp_coeffs_of_lambda",
    "respace",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """A discrete variance-preserving schedule over timesteps 0..T.

    ``alpha_bar[t]`` is the squared signal coefficient of the marginal
    q(z_t | z_0); the per-step beta derived from consecutive entries never
    exceeds ``beta_max``.
    """

    kind: str  # "sqrt_discrete" | "vp_continuous"
    T: int
    s0: float
    beta_max: float
    alpha_bar: torch.Tensor  # float64, shape (T+1,)

    def alpha_bar_at(self, t) -> torch.Tensor:
        """ᾱ_t for integer t (scalar or tensor), float64."""
        if isinstance(t, torch.Tensor):
            return self.alpha_bar[t]
        return self.alpha_bar[int(t)]

    def log_snr(self) -> torch.Tensor:
        """λ_t = log(ᾱ_t / (1 − ᾱ_t)) on the integer grid, float64."""
        ab = self.alpha_bar
        return torch.log(ab) - torch.log1p(-ab)

    def serialize(self) -> dict:
        # alpha_bar is recomputed on load, never stored
        return {"kind": self.kind, "T": self.T, "s0": self.s0, "beta_max": self.beta_max}

    @staticmethod
    def deserialize(blob: dict) -> "NoiseSchedule":
        return make_sqrt_schedule(blob["T"], blob["s0"], blob["beta_max"])


@dataclass(frozen=True)
class ScheduleParams:
    """All marginal quantities at a single timestep, mutually consistent."""

    t: int
    beta: float
    alpha: float  # per-step 1 − β_t
    alpha_bar: float
    sigma: float  # sqrt(1 − ᾱ_t)
    snr: float
    log_snr: float


@dataclass(frozen=True)
class TransitionParams:
    """Coefficients of q(z_t | z_s) for s < t: z_t ~ N(α_{t|s} z_s, σ²_{t|s} I)."""

    s: int
    t: int
    alpha_ts: float  # ratio of sqrt(ᾱ) values
    sigma2_ts: float


def make_sqrt_schedule(T: int, s0: float = 1e-4, beta_max: float = 0.999) -> NoiseSchedule:
    """Build the sqrt schedule ᾱ_t = 1 − sqrt(t/T + s0), clamped per step.

    The raw formula goes negative at t = T whenever s0 > 0, so each step is
    floored at ᾱ_{t−1}·(1 − beta_max), which is exactly the constraint
    β_t ≤ beta_max. The result is strictly decreasing and stays in (0, 1].
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < s0 < 1.0):
        raise ValueError(f"s0 must be in (0, 1), got {s0}")
    if not (0.0 < beta_max < 1.0):
        raise ValueError(f"beta_max must be in (0, 1), got {beta_max}")

    ts = torch.arange(T + 1, dtype=torch.float64)
    raw = 1.0 - torch.sqrt(ts / T + s0)
    alpha_bar = torch.empty(T + 1, dtype=torch.float64)
    alpha_bar[0] = min(raw[0].item(), 1.0)
    for t in range(1, T + 1):
        floor = alpha_bar[t - 1] * (1.0 - beta_max)
        alpha_bar[t] = max(raw[t].item(), floor.item())
    return NoiseSchedule(kind="sqrt_discrete", T=T, s0=s0, beta_max=beta_max, alpha_bar=alpha_bar)


def params_at(sched: NoiseSchedule, t: int) -> ScheduleParams:
    """Marginal quantities at integer timestep t ∈ [0, T]."""
    if not (0 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t].item()
    if t == 0:
        beta = 0.0
    else:
        beta = 1.0 - ab / sched.alpha_bar[t - 1].item()
    sigma2 = 1.0 - ab
    snr = ab / sigma2
    return ScheduleParams(
        t=t,
        beta=beta,
        alpha=1.0 - beta,
        alpha_bar=ab,
        sigma=math.sqrt(sigma2),
        snr=snr,
        log_snr=math.log(snr),
    )


def transition(sched: NoiseSchedule, s: int, t: int) -> TransitionParams:
    """Coefficients of q(z_t | z_s), 0 ≤ s < t ≤ T."""
    if not (0 <= s < t <= sched.T):
        raise ValueError(f"need 0 <= s < t <= T, got s={s}, t={t}, T={sched.T}")
    ab_s = sched.alpha_bar[s].item()
    ab_t = sched.alpha_bar[t].item()
    alpha_ts = math.sqrt(ab_t / ab_s)
    sigma2_ts = (1.0 - ab_t) - alpha_ts**2 * (1.0 - ab_s)
    return TransitionParams(s=s, t=t, alpha_ts=alpha_ts, sigma2_ts=sigma2_ts)


def lambda_at(sched: NoiseSchedule, t: float) -> float:
    """logSNR λ(t) for real-valued t ∈ [0, T], linear interpolation between grid points."""
    if not (0.0 <= t <= sched.T):
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    lo = int(math.floor(t))
    hi = min(lo + 1, sched.T)
    lam = sched.log_snr()
    frac = t - lo
    return float(lam[lo] * (1.0 - frac) + lam[hi] * frac)


def t_of_lambda(sched: NoiseSchedule, lam: float) -> float:
    """Inverse of :func:`lambda_at`; λ is strictly decreasing in t."""
    grid = sched.log_snr()
    if lam >= grid[0]:
        return 0.0
    if lam <= grid[-1]:
        return float(sched.T)
    # grid is decreasing: find the bracketing cell by searching the negated array
    idx = int(torch.searchsorted(-grid, torch.tensor(-lam, dtype=torch.float64)))
    lo, hi = idx - 1, idx
    frac = (grid[lo].item() - lam) / (grid[lo].item() - grid[hi].item())
    return lo + frac


def vp_coeffs_of_lambda(lam: float) -> tuple[float, float]:
    """(α, σ) of the variance-preserving marginal at logSNR λ.

    α² = sigmoid(λ) and σ² = sigmoid(−λ); α² + σ² = 1 by construction.
    """
    ab = 1.0 / (1.0 + math.exp(-lam))
    return math.sqrt(ab), math.sqrt(1.0 - ab)


def respace(sched: NoiseSchedule, n_steps: int, lambda_hi: float | None = None) -> tuple[NoiseSchedule, torch.Tensor]:
    """Subsample the schedule to ``n_steps`` reverse steps, uniform in logSNR.

    Returns (sub_schedule, t_values): the sub-schedule has T = n_steps with
    alpha_bar[j] = sigmoid(λ_j) on a uniform λ grid spanning [λ(T), λ(0)], and
    t_values[j] is the real-valued original timestep of grid point j
    (t_values[n_steps] = T, t_values[0] ≈ 0). The sub-schedule's beta_max is
    the largest per-step beta it actually realizes.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    lam_grid = sched.log_snr()
    hi = float(lam_grid[0]) if lambda_hi is None else lambda_hi
    lo = float(lam_grid[-1])
    lams = torch.linspace(hi, lo, n_steps + 1, dtype=torch.float64)  # index 0=cleanest
    alpha_bar = torch.sigmoid(lams)
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    sub = NoiseSchedule(
        kind=sched.kind,
        T=n_steps,
        s0=sched.s0,
        beta_max=float(betas.max()),
        alpha_bar=alpha_bar,
    )
    t_values = torch.tensor([t_of_lambda(sched, float(l)) for l in lams], dtype=torch.float64)
    return sub, t_values

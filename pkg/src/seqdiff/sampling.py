"""Reverse-process samplers and answer aggregation.

A reasoning sample starts from Gaussian noise on the generated region, runs
T_steps reverse steps on a logSNR-uniform grid (ancestral or first-order
exponential-integrator), re-anchors the condition after every step, and rounds
the final latent back to tokens. The multi-pass variant generates one thought
per pass, growing the condition until a thought carries EOS.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import torch

from .checkpoint import TrainedModel
from .denoiser import Denoiser
from .diffusion import LatentState, ancestral_step, anchor
from .schedule import NoiseSchedule, lambda_at, respace, vp_coeffs_of_lambda
from .textspace import Vocabulary, detokenize, embed, parse_answer, round_latents, tokenize

__all__ = [
    "SamplerConfig",
    "ReasoningOutput",
    "ode_step",
    "sample_dot",
    "sample_multipass",
    "self_consistency",
]


@dataclass
class SamplerConfig:
    T_steps: int = 64
    solver: str = "ancestral"  # "ancestral" | "ode1"
    z_noise_temperature: float = 0.5
    logit_temperature: float = 0.5
    clamp_to_embedding: bool = False
    max_passes: int = 8
    m: int = 20
    seed: int = 0

    def validate(self) -> "SamplerConfig":
        if self.T_steps < 1:
            raise ValueError(f"T_steps must be >= 1, got {self.T_steps}")
        if self.solver not in ("ancestral", "ode1"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.max_passes < 1 or self.m < 1:
            raise ValueError("max_passes and m must be >= 1")
        return self


@dataclass
class ReasoningOutput:
    rationale_text: str
    answer: str
    passes: int
    forward_calls: int
    wallclock_s: float
    truncated: bool = False


def ode_step(
    sched: NoiseSchedule,
    z_prev: LatentState,
    t_prev: float,
    t_cur: float,
    z0_hat: torch.Tensor,
    mask: torch.Tensor,
) -> LatentState:
    """First-order exponential-integrator step t_prev → t_cur (t_cur < t_prev).

    On the noised region: y ← (σ_cur/σ_prev)·y − α_cur·(e^{−h} − 1)·ẑ_0 with
    h = λ_cur − λ_prev; condition positions are carried over unchanged.
    """
    lam_prev = lambda_at(sched, t_prev)
    lam_cur = lambda_at(sched, t_cur)
    if lam_cur < lam_prev:
        raise ValueError(f"non-monotone timestep pair: t_prev={t_prev}, t_cur={t_cur}")
    if lam_cur == lam_prev:
        return LatentState(z=z_prev.z.clone(), t=t_cur, mask=mask)
    h = lam_cur - lam_prev
    alpha_cur, sigma_cur = vp_coeffs_of_lambda(lam_cur)
    _, sigma_prev = vp_coeffs_of_lambda(lam_prev)
    y = (sigma_cur / sigma_prev) * z_prev.z - alpha_cur * (math.exp(-h) - 1.0) * z0_hat
    z = torch.where(mask.to(torch.bool).unsqueeze(-1), y, z_prev.z)
    return LatentState(z=z, t=t_cur, mask=mask)


class _CallCounter:
    """Wraps the denoiser so reported forward_calls matches real invocations."""

    def __init__(self, model: Denoiser):
        self.model = model
        self.calls = 0

    def __call__(self, *args, **kwargs):
        self.calls += 1
        return self.model(*args, **kwargs)


def _clamp_to_table(z0_hat: torch.Tensor, model: Denoiser) -> torch.Tensor:
    ids, _ = round_latents(z0_hat, model.table, 1.0)
    return embed(ids, model.table)


@torch.no_grad()
def _reverse_pass(
    net: _CallCounter,
    cond_ids: list[int],
    total_len: int,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> torch.Tensor:
    """One full reverse trajectory; returns the token ids of the whole sequence."""
    model = net.model
    x_ids = torch.tensor(cond_ids, dtype=torch.long)
    x_emb_rows = model.tok_emb(x_ids)
    x_full = torch.zeros(total_len, model.cfg.embed_dim, dtype=x_emb_rows.dtype)
    x_full[: len(cond_ids)] = x_emb_rows
    mask = torch.ones(total_len, dtype=torch.long)
    mask[: len(cond_ids)] = 0

    sub, t_values = respace(sched, cfg.T_steps)
    z = torch.randn(total_len, model.cfg.embed_dim, generator=generator, dtype=x_emb_rows.dtype)
    state = anchor(LatentState(z=z, t=float(sched.T), mask=mask), x_full, mask)

    self_cond = None
    for j in range(cfg.T_steps, 0, -1):
        t_tag = float(t_values[j])
        z0_hat = net(state.z, t_tag, mask, self_cond)
        self_cond = z0_hat
        if cfg.clamp_to_embedding:
            z0_hat = _clamp_to_table(z0_hat, model)
        if cfg.solver == "ancestral":
            state = ancestral_step(sub, state, z0_hat, j, cfg.z_noise_temperature, generator)
        else:
            state = ode_step(sched, state, t_tag, float(t_values[j - 1]), z0_hat, mask)
        state = anchor(state, x_full, mask)

    ids, _ = round_latents(state.z, model.table, cfg.logit_temperature)
    ids[: len(cond_ids)] = x_ids  # anchored region decodes to the condition by construction
    return ids


def _cut_region(ids: list[int], vocab: Vocabulary, stop_at_sep: bool) -> tuple[list[int], str | None]:
    """Tokens of a generated region up to its terminator; returns (kept, stopper)."""
    kept: list[int] = []
    for i in ids:
        if i == vocab.eos_id:
            return kept, "eos"
        if stop_at_sep and i == vocab.sep_id:
            return kept, "sep"
        kept.append(i)
    return kept, None


def _strip_fillers(ids: list[int], vocab: Vocabulary) -> list[int]:
    drop = {vocab.pad_id, vocab.mask_id}
    return [i for i in ids if i not in drop]


def sample_dot(
    tm: TrainedModel,
    x_tokens: list[int] | str,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> ReasoningOutput:
    """Single-pass generation: the whole rationale block denoises in parallel."""
    cfg.validate()
    t0 = time.monotonic()
    vocab: Vocabulary = tm.vocab
    cond = tokenize(x_tokens, vocab) if isinstance(x_tokens, str) else list(x_tokens)
    L = tm.model.cfg.max_len
    if len(cond) >= L:
        raise ValueError(f"condition length {len(cond)} leaves no room in max_len {L}")
    net = _CallCounter(tm.model)
    ids = _reverse_pass(net, cond, L, tm.sched, cfg, generator)
    region = ids[len(cond):].tolist()
    kept, _ = _cut_region(region, vocab, stop_at_sep=False)
    text = detokenize(_strip_fillers(kept, vocab), vocab)
    return ReasoningOutput(
        rationale_text=text,
        answer=parse_answer(text),
        passes=1,
        forward_calls=net.calls,
        wallclock_s=time.monotonic() - t0,
    )


def sample_multipass(
    tm: TrainedModel,
    x_tokens: list[int] | str,
    cfg: SamplerConfig,
    generator: torch.Generator,
) -> ReasoningOutput:
    """Thought-by-thought generation; stops when a decoded thought carries EOS."""
    cfg.validate()
    t0 = time.monotonic()
    vocab: Vocabulary = tm.vocab
    cond = tokenize(x_tokens, vocab) if isinstance(x_tokens, str) else list(x_tokens)
    L = tm.model.cfg.max_len
    net = _CallCounter(tm.model)

    thought_texts: list[str] = []
    passes = 0
    stopped = False
    while passes < cfg.max_passes:
        if len(cond) >= L - 1:
            break  # no room left to generate
        passes += 1
        ids = _reverse_pass(net, cond, L, tm.sched, cfg, generator)
        region = ids[len(cond):].tolist()
        kept, stopper = _cut_region(region, vocab, stop_at_sep=True)
        kept = _strip_fillers(kept, vocab)
        if kept:
            thought_texts.append(detokenize(kept, vocab))
        if stopper == "eos":
            stopped = True
            break
        cond = cond + kept + [vocab.sep_id]

    text = " ".join(thought_texts)
    return ReasoningOutput(
        rationale_text=text,
        answer=parse_answer(text),
        passes=passes,
        forward_calls=net.calls,
        wallclock_s=time.monotonic() - t0,
        truncated=not stopped,
    )


def self_consistency(outputs: list[ReasoningOutput]) -> str:
    """Most frequent non-empty answer; ties break on first occurrence."""
    if not outputs:
        raise ValueError("need at least one output")
    counts: dict[str, int] = {}
    order: dict[str, int] = {}
    for i, out in enumerate(outputs):
        a = out.answer
        if not a:
            continue
        counts[a] = counts.get(a, 0) + 1
        order.setdefault(a, i)
    if not counts:
        return ""
    return max(counts, key=lambda a: (counts[a], -order[a]))

"""Loss computation, training-time sampling strategies, and the optimizer loop.

Randomness is counter-based: every step derives its own generator from
(seed, step), so a run resumed from a checkpoint consumes exactly the same
noise stream as an uninterrupted one. Within a step the draw order is fixed:
batch indices, coupling flags, timesteps, oracle/scheduled branch flags,
forward noise, scheduled-branch draws, self-conditioning flag. Draws whose
probability is exactly 0 or 1 are skipped entirely, so turning a mechanism
off removes it from the stream instead of shifting it.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import checkpoint as ckpt_io
from .denoiser import Denoiser, DenoiserConfig, init_denoiser
from .diffusion import LatentState, forward_noise
from .schedule import NoiseSchedule
from .tasks import Example
from .textspace import SeqPair, Vocabulary, concat_pair, tokenize

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "TrainingDiverged",
    "EncodedDataset",
    "epsilon_at",
    "oracle_probability",
    "scheduled_sampling_zt",
    "couple_mask",
    "compute_loss",
    "prior_loss",
    "encode_single_pass",
    "encode_multipass",
    "step_generator",
    "train",
    "run_loop",
]

METRICS_COLUMNS = ("step", "total", "diffusion", "rounding", "eps_i", "wallclock_s")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 2000
    batch: int = 64
    seq_len: int = 48
    eps_min: float = 0.95
    gamma: float = 0.01
    k: int = 1
    self_cond_prob: float = 0.5
    loss_weighting: str = "uniform"  # "uniform" | "snr_delta"
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only
    warmup_frac: float = 0.01
    scheduled_semantics: str = "oracle"  # "oracle": eps is the oracle-branch probability

    def validate(self) -> "TrainConfig":
        if not (0.0 < self.eps_min <= 1.0):
            raise ValueError(f"eps_min must be in (0, 1], got {self.eps_min}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.loss_weighting not in ("uniform", "snr_delta"):
            raise ValueError(f"unknown loss_weighting {self.loss_weighting!r}")
        if self.scheduled_semantics not in ("oracle", "inference"):
            raise ValueError(f"unknown scheduled_semantics {self.scheduled_semantics!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    diffusion: float
    rounding: float
    total: float
    t_sampled: tuple[int, ...]
    used_scheduled_branch: tuple[bool, ...]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_checkpoint: str | None):
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {last_checkpoint}")
        self.step = step
        self.last_checkpoint = last_checkpoint


def step_generator(seed: int, step: int) -> torch.Generator:
    """Independent per-step noise stream derived from (seed, step)."""
    digest = hashlib.sha256(f"{seed}:{step}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") >> 1)


def epsilon_at(i: int, total_steps: int, eps_min: float) -> float:
    """Linear decay from 1 at i=0 to eps_min at i=total_steps."""
    if not (0 <= i <= total_steps):
        raise ValueError(f"step {i} outside [0, {total_steps}]")
    if total_steps == 0:
        return 1.0
    return 1.0 + (eps_min - 1.0) * (i / total_steps)


def oracle_probability(eps: float, semantics: str = "oracle") -> float:
    """Probability of drawing z_t from the true forward process this step."""
    return eps if semantics == "oracle" else 1.0 - eps


def scheduled_sampling_zt(
    z0: torch.Tensor,
    mask: torch.Tensor,
    t: int,
    sched: NoiseSchedule,
    model: Denoiser,
    generator: torch.Generator,
) -> LatentState:
    """Inference-mimicking z_t: noise to a later u, denoise, then re-noise to t.

    Gradients are blocked through the inner prediction; condition positions
    always stay at z0.
    """
    if t >= sched.T:
        raise ValueError(f"scheduled sampling needs t < T, got t={t}, T={sched.T}")
    u = int(torch.randint(t + 1, sched.T + 1, (1,), generator=generator))
    z_u = forward_noise(z0, mask, u, sched, generator)
    with torch.no_grad():
        z0_hat = model(z_u.z, float(u), mask)
    spliced = torch.where(mask.to(torch.bool).unsqueeze(-1), z0_hat, z0)
    return forward_noise(spliced, mask, t, sched, generator)


def couple_mask(
    n_positions: int,
    thought_spans: Sequence[tuple[int, int]],
    current: int,
    gamma: float,
    k: int,
    generator: torch.Generator,
) -> torch.Tensor:
    """Noising mask for one multi-pass training pair.

    Mask 1 covers the current thought span; with probability gamma it extends
    back over the previous k thoughts (clamped at the first). Everything else,
    the question span included, stays 0.
    """
    if not thought_spans:
        raise ValueError("thought_spans must be non-empty")
    last_end = 0
    for lo, hi in thought_spans:
        if lo < last_end or hi <= lo or hi > n_positions:
            raise ValueError(f"invalid span ({lo}, {hi})")
        last_end = hi
    if not (0 <= current < len(thought_spans)):
        raise ValueError(f"current span index {current} out of range")

    start, end = thought_spans[current]
    if gamma > 0.0 and current > 0:
        coupled = True if gamma >= 1.0 else bool(torch.rand((), generator=generator) < gamma)
        if coupled:
            start = thought_spans[max(0, current - k)][0]
    mask = torch.zeros(n_positions, dtype=torch.long)
    mask[start:end] = 1
    return mask


def _snr(sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar
    return ab / (1.0 - ab)


def compute_loss(
    model: Denoiser,
    batch: tuple[torch.Tensor, torch.Tensor],
    sched: NoiseSchedule,
    cfg: TrainConfig,
    step_i: int,
    generator: torch.Generator,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Diffusion + rounding loss over one batch of (tokens, mask) rows.

    Per example: t ~ U{1..T}; z_t comes from the forward process, or from
    :func:`scheduled_sampling_zt` with probability 1 − ε_i (t = T always uses
    the forward process). The diffusion term is the weighted masked MSE to the
    clean latent; the rounding term is shared-table cross-entropy on the
    masked tokens.
    """
    tokens, mask = batch
    if tokens.numel() == 0:
        raise ValueError("empty batch")
    B = tokens.shape[0]
    z0 = model.tok_emb(tokens)
    t = torch.randint(1, sched.T + 1, (B,), generator=generator)

    eps_i = epsilon_at(step_i, cfg.steps, cfg.eps_min)
    p_oracle = oracle_probability(eps_i, cfg.scheduled_semantics)
    if p_oracle >= 1.0:
        scheduled = torch.zeros(B, dtype=torch.bool)
    elif p_oracle <= 0.0:
        scheduled = t < sched.T
    else:
        draws = torch.rand(B, generator=generator)
        scheduled = (draws >= p_oracle) & (t < sched.T)

    z_t = forward_noise(z0, mask, t, sched, generator).z
    if scheduled.any():
        z_t = z_t.clone()
        for i in torch.nonzero(scheduled).flatten().tolist():
            z_t[i] = scheduled_sampling_zt(z0[i], mask[i], int(t[i]), sched, model, generator).z

    self_cond = None
    if model.cfg.self_conditioning and cfg.self_cond_prob > 0.0:
        use_sc = True if cfg.self_cond_prob >= 1.0 else bool(
            torch.rand((), generator=generator) < cfg.self_cond_prob
        )
        if use_sc:
            with torch.no_grad():
                self_cond = model(z_t, t, mask).detach()

    z0_hat = model(z_t, t, mask, self_cond)

    mask_f = mask.to(z0.dtype)
    sq = ((z0 - z0_hat) ** 2).sum(dim=-1)
    per_ex = (sq * mask_f).sum(dim=1) / mask_f.sum(dim=1).clamp(min=1.0)
    if cfg.loss_weighting == "snr_delta":
        snr = _snr(sched)
        w = ((snr[t - 1] - snr[t]) / 2.0).to(z0.dtype)
    else:
        w = torch.ones(B, dtype=z0.dtype)
    diffusion = (w * per_ex).mean()

    logits = z0 @ model.tok_emb.weight.T
    flat = mask.reshape(-1).to(torch.bool)
    rounding = torch.nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1])[flat], tokens.reshape(-1)[flat]
    )

    total = diffusion + rounding
    if not torch.isfinite(total):
        raise TrainingDiverged(step_i, None)
    breakdown = LossBreakdown(
        diffusion=diffusion.item(),
        rounding=rounding.item(),
        total=total.item(),
        t_sampled=tuple(int(x) for x in t),
        used_scheduled_branch=tuple(bool(x) for x in scheduled),
    )
    return total, breakdown


def prior_loss(z0: torch.Tensor, mask: torch.Tensor, sched: NoiseSchedule) -> float:
    """KL(q(z_T | z_0) || N(0, I)) per masked coordinate; constant for a fixed schedule."""
    ab_T = float(sched.alpha_bar[-1])
    var = 1.0 - ab_T
    m = mask.to(torch.bool)
    mean_sq = float((z0[m] ** 2).mean()) if m.any() else 0.0
    return 0.5 * (ab_T * mean_sq + var - 1.0 - math.log(var))


@dataclass
class EncodedDataset:
    """Pre-tokenized rows ready for batching.

    For multi-pass rows, ``spans``/``current`` drive per-step coupled-mask
    resampling; single-pass rows leave them None.
    """

    tokens: torch.Tensor  # (N, L) long
    mask: torch.Tensor  # (N, L) long
    vocab: Vocabulary
    spans: list | None = None  # per-row list of (start, end) thought spans
    current: list | None = None  # per-row index of the trained thought

    def __len__(self) -> int:
        return self.tokens.shape[0]


def encode_single_pass(examples: Sequence[Example], vocab: Vocabulary, L: int) -> EncodedDataset:
    """One row per example: [question ; rationales #### answer EOS ; PAD...]."""
    rows = []
    for ex in examples:
        x = tokenize(ex.question, vocab)
        y = tokenize(ex.target_text(), vocab) + [vocab.eos_id]
        rows.append(concat_pair(x, y, L, vocab))
    return EncodedDataset(
        tokens=torch.stack([r.tokens for r in rows]),
        mask=torch.stack([r.mask for r in rows]),
        vocab=vocab,
    )


def encode_multipass(examples: Sequence[Example], vocab: Vocabulary, L: int) -> EncodedDataset:
    """One row per (prefix, next thought) pair per example.

    The answer segment '#### a' is the last thought and ends with EOS; earlier
    thoughts end with SEP. Spans cover each thought including its terminator
    so coupled masks extend over contiguous regions.
    """
    tokens_rows, mask_rows, spans_rows, current_rows = [], [], [], []
    for ex in examples:
        thoughts = list(ex.rationales) + [f"#### {ex.answer}"]
        tok_thoughts = [tokenize(th, vocab) for th in thoughts]
        for j, tt in enumerate(tok_thoughts):
            tok_thoughts[j] = tt + [vocab.eos_id if j == len(thoughts) - 1 else vocab.sep_id]
        q = tokenize(ex.question, vocab)
        for j in range(len(thoughts)):
            x = q + [tok for tt in tok_thoughts[:j] for tok in tt]
            pair = concat_pair(x, tok_thoughts[j], L, vocab)
            spans = []
            off = len(q)
            for tt in tok_thoughts[: j + 1]:
                spans.append((off, off + len(tt)))
                off += len(tt)
            tokens_rows.append(pair.tokens)
            mask_rows.append(pair.mask)
            spans_rows.append(spans)
            current_rows.append(j)
    return EncodedDataset(
        tokens=torch.stack(tokens_rows),
        mask=torch.stack(mask_rows),
        vocab=vocab,
        spans=spans_rows,
        current=current_rows,
    )


def _assemble_batch(
    dataset: EncodedDataset, idx: torch.Tensor, cfg: TrainConfig, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    tokens = dataset.tokens[idx]
    mask = dataset.mask[idx].clone()
    if dataset.spans is not None and cfg.gamma > 0.0:
        L = tokens.shape[1]
        for bi, di in enumerate(idx.tolist()):
            spans, cur = dataset.spans[di], dataset.current[di]
            if cur > 0:
                cm = couple_mask(L, spans, cur, cfg.gamma, cfg.k, generator)
                mask[bi] = torch.maximum(mask[bi], cm)
    return tokens, mask


def run_loop(
    model: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module, tuple, int, torch.Generator], tuple[torch.Tensor, dict]],
    dataset: EncodedDataset,
    cfg: TrainConfig,
    save_fn: Callable[[torch.nn.Module, torch.optim.Optimizer, int, str], None] | None = None,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    opt_state: dict | None = None,
    log_every: int = 100,
) -> dict:
    """Generic Adam loop shared by both backends; returns run summary."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    params = list(model.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    if opt_state is not None:
        _load_opt_state(opt, model, opt_state, start_step)
    warmup_steps = max(1, int(cfg.warmup_frac * cfg.steps))

    metrics_path = out_dir / "metrics.csv" if out_dir is not None else None
    writer = None
    metrics_file = None
    if metrics_path is not None:
        fresh = not metrics_path.exists() or start_step == 0
        metrics_file = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.writer(metrics_file)
        if fresh:
            writer.writerow(METRICS_COLUMNS)

    last_ckpt: str | None = None
    history: list[dict] = []
    t0 = time.monotonic()
    model.train()
    try:
        for step in range(start_step, cfg.steps):
            g = step_generator(cfg.seed, step)
            idx = torch.randint(len(dataset), (cfg.batch,), generator=g)
            batch = _assemble_batch(dataset, idx, cfg, g)
            try:
                total, info = loss_fn(model, batch, step, g)
            except (TrainingDiverged, FloatingPointError) as e:
                raise TrainingDiverged(step, last_ckpt) from e
            opt.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            lr = cfg.lr * min(1.0, (step + 1) / warmup_steps)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.step()

            row = {"step": step, "wallclock_s": time.monotonic() - t0, **info}
            history.append(row)
            if writer is not None:
                writer.writerow([row.get(c, "") for c in METRICS_COLUMNS])
            if log_every and (step % log_every == 0 or step == cfg.steps - 1):
                logger.info("step %d: %s", step, {k: round(v, 4) for k, v in info.items()})
                if metrics_file is not None:
                    metrics_file.flush()

            if save_fn is not None and out_dir is not None:
                at_interval = cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0
                if at_interval or step == cfg.steps - 1:
                    ckpt_path = str(out_dir / f"step-{step + 1:07d}")
                    save_fn(model, opt, step + 1, ckpt_path)
                    last_ckpt = ckpt_path
        if save_fn is not None and out_dir is not None and cfg.steps == start_step:
            ckpt_path = str(out_dir / f"step-{cfg.steps:07d}")
            save_fn(model, opt, cfg.steps, ckpt_path)
            last_ckpt = ckpt_path
    finally:
        if metrics_file is not None:
            metrics_file.close()
    model.eval()
    return {"history": history, "last_checkpoint": last_ckpt, "metrics_path": str(metrics_path) if metrics_path else None}


def _load_opt_state(opt: torch.optim.Optimizer, model: torch.nn.Module, opt_tensors: dict, step: int) -> None:
    state = {}
    for name, p in model.named_parameters():
        ea = opt_tensors.get(f"opt.exp_avg.{name}")
        eas = opt_tensors.get(f"opt.exp_avg_sq.{name}")
        if ea is None or eas is None:
            continue
        state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": ea.to(p.dtype),
            "exp_avg_sq": eas.to(p.dtype),
        }
    opt.state.update(state)


def train(
    cfg: TrainConfig,
    dataset: EncodedDataset,
    denoiser_cfg: DenoiserConfig,
    sched: NoiseSchedule,
    out_dir: str | Path | None = None,
    resume_from: str | None = None,
    log_every: int = 100,
) -> dict:
    """Train the continuous-backend denoiser; returns {model, history, ...}."""
    cfg.validate()
    if resume_from is not None:
        tm = ckpt_io.load_trained(resume_from)
        model, start_step, opt_state = tm.model, tm.step, tm.opt_tensors
        model.train()
    else:
        model, start_step, opt_state = init_denoiser(denoiser_cfg, cfg.seed), 0, None

    first_idx = torch.randint(len(dataset), (min(cfg.batch, len(dataset)),), generator=step_generator(cfg.seed, -1))
    z0 = model.tok_emb(dataset.tokens[first_idx]).detach()
    logger.info("prior loss (constant, excluded from gradients): %.6f", prior_loss(z0, dataset.mask[first_idx], sched))

    def loss_fn(m, batch, step, g):
        total, bd = compute_loss(m, batch, sched, cfg, step, g)
        return total, {
            "total": bd.total,
            "diffusion": bd.diffusion,
            "rounding": bd.rounding,
            "eps_i": epsilon_at(step, cfg.steps, cfg.eps_min),
        }

    def save_fn(m, opt, step, path):
        ckpt_io.save_trained(
            path, "continuous", m, dataset.vocab, cfg.to_dict(), step, sched=sched, optimizer=opt
        )

    summary = run_loop(
        model, loss_fn, dataset, cfg,
        save_fn=save_fn if out_dir is not None else None,
        out_dir=out_dir, start_step=start_step, opt_state=opt_state, log_every=log_every,
    )
    summary["model"] = model
    return summary

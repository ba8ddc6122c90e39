"""Discrete-state diffusion backend: rate matrices, closed-form kernels,
score-entropy training and tau-leaping generation.

The forward process is a continuous-time Markov jump driven by a uniform or
absorbing rate matrix; cumulative noise follows a geometric schedule. The
score network predicts probability ratios toward every single-token
substitution, and the reverse sampler leaps all positions simultaneously.
Condition positions are never touched, mirroring the continuous backend's
partial noising.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn

from . import checkpoint as ckpt_io
from .denoiser import Block, DenoiserConfig, sinusoidal_embedding
from .sampling import ReasoningOutput
from .textspace import Vocabulary, detokenize, parse_answer, tokenize
from .training import EncodedDataset, TrainConfig, TrainingDiverged, run_loop

__all__ = [
    "RateMatrix",
    "GeometricNoise",
    "ScoreNetConfig",
    "ScoreNet",
    "init_scorenet",
    "transition_kernel",
    "kernel_rows",
    "forward_sample_discrete",
    "score_entropy_loss",
    "tau_leap_step",
    "sample_discrete",
    "train_discrete",
]

_TIME_SCALE = 1000.0  # sinusoidal resolution for t in [0, 1]
_MAX_LOG_SCORE = 30.0


@dataclass(frozen=True)
class RateMatrix:
    """Uniform or absorbing jump-rate structure over V states.

    ``dense()[target, source]`` is the instantaneous rate; columns sum to
    zero. For the absorbing kind the MASK column is all zeros.
    """

    kind: str  # "uniform" | "absorbing"
    V: int
    mask_id: int | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "absorbing"):
            raise ValueError(f"unknown rate matrix kind {self.kind!r}")
        if self.V < 2:
            raise ValueError("need at least two states")
        if self.kind == "absorbing" and self.mask_id is None:
            raise ValueError("absorbing kind needs mask_id (use RateMatrix.absorbing to append one)")

    @classmethod
    def uniform(cls, V: int) -> "RateMatrix":
        return cls(kind="uniform", V=V, mask_id=None)

    @classmethod
    def absorbing(cls, V: int, mask_id: int | None = None) -> "RateMatrix":
        """Absorbing matrix; appends a fresh MASK state when the vocabulary has none."""
        if mask_id is None:
            return cls(kind="absorbing", V=V + 1, mask_id=V)
        return cls(kind="absorbing", V=V, mask_id=mask_id)

    def dense(self) -> torch.Tensor:
        Q = torch.zeros(self.V, self.V, dtype=torch.float64)
        if self.kind == "uniform":
            Q.fill_(1.0)
            Q.fill_diagonal_(1.0 - self.V)
        else:
            m = self.mask_id
            Q[m, :] = 1.0
            Q.fill_diagonal_(-1.0)
            Q[m, m] = 0.0
            Q[:, m] = 0.0
            Q[m, m] = 0.0
        return Q

    def serialize(self) -> dict:
        return {"kind": self.kind, "V": self.V, "mask_id": self.mask_id}

    @classmethod
    def deserialize(cls, blob: dict) -> "RateMatrix":
        return cls(kind=blob["kind"], V=blob["V"], mask_id=blob["mask_id"])


@dataclass(frozen=True)
class GeometricNoise:
    """Cumulative noise σ̄(t) = σ_min^(1−t) σ_max^t for t in [0, 1]."""

    sigma_min: float = 1e-3
    sigma_max: float = 10.0

    def sigma_bar(self, t: float) -> float:
        return self.sigma_min ** (1.0 - t) * self.sigma_max**t

    def sigma(self, t: float) -> float:
        """dσ̄/dt."""
        return self.sigma_bar(t) * math.log(self.sigma_max / self.sigma_min)

    def t_of_sigma_bar(self, sigma_bar: float) -> float:
        return math.log(sigma_bar / self.sigma_min) / math.log(self.sigma_max / self.sigma_min)

    def serialize(self) -> dict:
        return {"sigma_min": self.sigma_min, "sigma_max": self.sigma_max}

    @classmethod
    def deserialize(cls, blob: dict) -> "GeometricNoise":
        return cls(**blob)


def transition_kernel(Q: RateMatrix, sigma_bar: float, x0: int) -> torch.Tensor:
    """Closed-form exp(σ̄ Q) column for source state x0, as a probability vector."""
    if sigma_bar < 0:
        raise ValueError(f"sigma_bar must be >= 0, got {sigma_bar}")
    return kernel_rows(Q, torch.tensor(sigma_bar, dtype=torch.float64), torch.tensor(x0)).squeeze(0)


def kernel_rows(Q: RateMatrix, sigma_bar: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Vectorized transition kernel: rows q_{t|0}(· | x0) for each source token.

    ``sigma_bar`` broadcasts against ``x0``; the output has one extra trailing
    axis of size V and sums to 1 along it.
    """
    x0 = torch.as_tensor(x0, dtype=torch.long)
    scalar = x0.dim() == 0
    if scalar:
        x0 = x0.reshape(1)
    sb = torch.as_tensor(sigma_bar, dtype=torch.float64).expand(x0.shape)
    one_hot = torch.nn.functional.one_hot(x0, Q.V).to(torch.float64)
    if Q.kind == "uniform":
        stay_extra = torch.exp(-Q.V * sb)
        base = (1.0 - stay_extra) / Q.V
        probs = base.unsqueeze(-1) + stay_extra.unsqueeze(-1) * one_hot
    else:
        # for x0 = MASK this collapses to a one-hot at MASK: the state is absorbing
        keep = torch.exp(-sb)
        probs = keep.unsqueeze(-1) * one_hot
        probs[..., Q.mask_id] += 1.0 - keep
    return probs


def forward_sample_discrete(
    x0: torch.Tensor,
    sigma_bar,
    Q: RateMatrix,
    generator: torch.Generator,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Independently perturb each position by the closed-form kernel.

    Positions with mask 0 are copied unchanged (partial noising).
    """
    shape = x0.shape
    sb = torch.as_tensor(sigma_bar, dtype=torch.float64)
    if sb.dim() == 1 and x0.dim() == 2:
        sb = sb.unsqueeze(-1).expand(shape)
    else:
        sb = sb.expand(shape)
    probs = kernel_rows(Q, sb.reshape(-1), x0.reshape(-1))
    drawn = torch.multinomial(probs.to(torch.float32), 1, generator=generator).reshape(shape)
    if mask is not None:
        drawn = torch.where(mask.to(torch.bool), drawn, x0)
    return drawn


@dataclass
class ScoreNetConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    max_len: int = 64
    vocab_size: int = 0
    dropout: float = 0.0

    def validate(self) -> "ScoreNetConfig":
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be set")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class ScoreNet(nn.Module):
    """Transformer body shared with the denoiser, V-way positive ratio head."""

    def __init__(self, cfg: ScoreNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.model_dim))
        self.region_emb = nn.Embedding(2, cfg.model_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.model_dim), nn.SiLU(), nn.Linear(cfg.model_dim, cfg.model_dim)
        )
        bc = DenoiserConfig(
            layers=cfg.layers, model_dim=cfg.model_dim, heads=cfg.heads, ff_dim=cfg.ff_dim,
            max_len=cfg.max_len, vocab_size=cfg.vocab_size, embed_dim=cfg.model_dim,
            self_conditioning=False, dropout=cfg.dropout,
        )
        self.blocks = nn.ModuleList(Block(bc) for _ in range(cfg.layers))
        self.final_ln = nn.LayerNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.vocab_size)

    def forward(self, tokens: torch.Tensor, t, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Positive ratio estimates s(x_t, t), shape (..., L, V)."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
            if mask is not None and mask.dim() == 1:
                mask = mask.unsqueeze(0)
        B, L = tokens.shape
        if mask is None:
            mask = torch.ones(B, L, dtype=torch.long)
        h = self.tok_emb(tokens) + self.pos_emb[:L]
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([float(t)])
        t = t.to(h.dtype).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        h = h + self.time_mlp(sinusoidal_embedding(t * _TIME_SCALE, self.cfg.model_dim))[:, None, :]
        h = h + self.region_emb(mask.long())
        for block in self.blocks:
            h = block(h)
        logits = self.head(self.final_ln(h))
        s = torch.exp(logits.clamp(max=_MAX_LOG_SCORE))
        if not torch.isfinite(s).all():
            raise FloatingPointError("non-finite score output")
        return s.squeeze(0) if squeeze else s


def init_scorenet(cfg: ScoreNetConfig, seed: int) -> ScoreNet:
    model = ScoreNet(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.tok_emb.weight.normal_(0.0, 0.02, generator=g)
        model.pos_emb.normal_(0.0, 0.02, generator=g)
        model.region_emb.weight.normal_(0.0, 0.02, generator=g)
        for m in model.modules():
            if isinstance(m, nn.Linear):
                m.weight.normal_(0.0, 0.02, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


def score_entropy_pointwise(s: torch.Tensor, ratios: torch.Tensor, self_index: torch.Tensor) -> torch.Tensor:
    """Σ_{y≠x} s_y − r_y·log s_y per position; the minimizer is s = r."""
    terms = s - ratios * torch.log(s)
    terms = terms.scatter(-1, self_index.unsqueeze(-1), 0.0)
    return terms.sum(dim=-1)


def score_entropy_loss(
    scorenet: ScoreNet,
    batch: tuple[torch.Tensor, torch.Tensor],
    Q: RateMatrix,
    noise: GeometricNoise,
    generator: torch.Generator,
) -> tuple[torch.Tensor, dict]:
    """Denoising score entropy over masked positions, t ~ U(0, 1) per example."""
    tokens, mask = batch
    if tokens.numel() == 0:
        raise ValueError("empty batch")
    B, L = tokens.shape
    t = torch.rand(B, generator=generator, dtype=torch.float64)
    log_ratio = math.log(noise.sigma_max / noise.sigma_min)
    sb = noise.sigma_min * torch.exp(t * log_ratio)

    x_t = forward_sample_discrete(tokens, sb, Q, generator, mask=mask)
    s = scorenet(x_t, t.to(torch.float32), mask)

    kern = kernel_rows(Q, sb.unsqueeze(-1).expand(B, L).reshape(-1), tokens.reshape(-1))
    denom = kern.gather(-1, x_t.reshape(-1, 1))
    ratios = (kern / denom).reshape(B, L, Q.V).to(s.dtype)

    per_pos = score_entropy_pointwise(s, ratios, x_t)
    mask_f = mask.to(s.dtype)
    loss = (per_pos * mask_f).sum() / mask_f.sum().clamp(min=1.0)
    if not torch.isfinite(loss):
        raise TrainingDiverged(-1, None)
    val = loss.item()
    return loss, {"total": val, "diffusion": val, "rounding": 0.0, "eps_i": 1.0}


def _leap(
    s: torch.Tensor,
    x_t: torch.Tensor,
    delta_sigma_bar: float,
    Q: RateMatrix,
    generator: torch.Generator,
    cond_mask: torch.Tensor | None,
    on_overflow: str,
) -> torch.Tensor:
    dense = Q.dense().to(torch.float32)
    flat_x = x_t.reshape(-1)
    rates = dense[flat_x].clamp(min=0.0)  # row x: forward rates y → x, diagonal dropped
    probs = s.reshape(-1, Q.V) * rates * delta_sigma_bar
    probs = probs.scatter(-1, flat_x.unsqueeze(-1), 0.0)
    total = probs.sum(dim=-1, keepdim=True)
    if bool((total > 1.0).any()):
        if on_overflow == "error":
            raise ValueError(
                f"tau-leap off-diagonal mass {float(total.max()):.3f} exceeds 1; reduce dt"
            )
        probs = torch.where(total > 1.0, probs / total, probs)
        total = probs.sum(dim=-1, keepdim=True)
    stay = (1.0 - total).clamp(min=0.0)
    probs = probs.scatter(-1, flat_x.unsqueeze(-1), stay)
    drawn = torch.multinomial(probs, 1, generator=generator).reshape(x_t.shape)
    if cond_mask is not None:
        drawn = torch.where(cond_mask.to(torch.bool), drawn, x_t)
    return drawn


def tau_leap_step(
    scorenet,
    x_t: torch.Tensor,
    t: float,
    dt: float,
    Q: RateMatrix,
    noise: GeometricNoise,
    generator: torch.Generator,
    mask: torch.Tensor | None = None,
    on_overflow: str = "clamp",
) -> torch.Tensor:
    """One simultaneous reverse jump t → t−dt.

    Off-diagonal probabilities are s_θ(x,t)_y · Q(x,y) · Δσ̄ with
    Δσ̄ = σ̄(t) − σ̄(t−dt); the stay probability absorbs the remainder. When
    the off-diagonal mass exceeds 1 the row is renormalized onto the simplex
    ("clamp", default) or an error advising a smaller dt is raised ("error").
    """
    if dt < 0 or t - dt < 0:
        raise ValueError(f"need 0 <= t-dt <= t, got t={t}, dt={dt}")
    if dt == 0:
        return x_t.clone()
    delta = noise.sigma_bar(t) - noise.sigma_bar(t - dt)
    with torch.no_grad():
        s = scorenet(x_t, t, mask)
    return _leap(s, x_t, delta, Q, generator, mask, on_overflow)


def _sigma_bar_grid(noise: GeometricNoise, steps: int, grid: str) -> list[float]:
    if grid == "uniform":
        return [noise.sigma_max * (1.0 - k / steps) for k in range(steps + 1)]
    if grid == "geometric":
        # log-uniform down to sigma_min, then one exact step to zero
        if steps == 1:
            return [noise.sigma_max, 0.0]
        ratio = (noise.sigma_min / noise.sigma_max) ** (1.0 / (steps - 1))
        levels = [noise.sigma_max * ratio**k for k in range(steps)]
        return levels + [0.0]
    raise ValueError(f"unknown grid {grid!r}")


@torch.no_grad()
def _reverse_tokens_discrete(
    scorenet,
    cond_ids: list[int],
    total_len: int,
    steps: int,
    Q: RateMatrix,
    noise: GeometricNoise,
    generator: torch.Generator,
    grid: str = "geometric",
) -> tuple[torch.Tensor, int]:
    """Run the reverse chain; returns (token ids, scorenet call count)."""
    mask = torch.ones(total_len, dtype=torch.long)
    mask[: len(cond_ids)] = 0
    x = torch.empty(total_len, dtype=torch.long)
    x[: len(cond_ids)] = torch.tensor(cond_ids, dtype=torch.long)
    if Q.kind == "absorbing":
        x[len(cond_ids):] = Q.mask_id
    else:
        init = torch.randint(Q.V, (total_len - len(cond_ids),), generator=generator)
        x[len(cond_ids):] = init

    levels = _sigma_bar_grid(noise, steps, grid) if steps > 0 else []
    calls = 0
    for k in range(steps):
        sb_hi, sb_lo = levels[k], levels[k + 1]
        t_tag = noise.t_of_sigma_bar(sb_hi)
        s = scorenet(x, t_tag, mask)
        calls += 1
        x = _leap(s, x, sb_hi - sb_lo, Q, generator, mask, on_overflow="clamp")
    return x, calls


def sample_discrete(
    tm: ckpt_io.TrainedModel,
    x_tokens: list[int] | str,
    steps: int,
    generator: torch.Generator,
    grid: str = "geometric",
) -> ReasoningOutput:
    """Tau-leaping generation from the terminal distribution; decodes directly."""
    t0 = time.monotonic()
    vocab: Vocabulary = tm.vocab
    cond = tokenize(x_tokens, vocab) if isinstance(x_tokens, str) else list(x_tokens)
    L = tm.model.cfg.max_len
    if len(cond) >= L:
        raise ValueError(f"condition length {len(cond)} leaves no room in max_len {L}")
    ids, calls = _reverse_tokens_discrete(tm.model, cond, L, steps, tm.rate, tm.noise, generator, grid)
    region = ids[len(cond):].tolist()
    kept: list[int] = []
    for i in region:
        if i == vocab.eos_id:
            break
        if i in (vocab.pad_id, vocab.mask_id):
            continue
        kept.append(i)
    text = detokenize(kept, vocab)
    return ReasoningOutput(
        rationale_text=text,
        answer=parse_answer(text),
        passes=1,
        forward_calls=calls,
        wallclock_s=time.monotonic() - t0,
    )


def train_discrete(
    cfg: TrainConfig,
    dataset: EncodedDataset,
    scorenet_cfg: ScoreNetConfig,
    rate: RateMatrix,
    noise: GeometricNoise,
    out_dir=None,
    resume_from: str | None = None,
    log_every: int = 100,
) -> dict:
    """Train the discrete-backend score network with denoising score entropy."""
    cfg.validate()
    if resume_from is not None:
        tm = ckpt_io.load_trained(resume_from)
        model, start_step, opt_state = tm.model, tm.step, tm.opt_tensors
        model.train()
    else:
        model, start_step, opt_state = init_scorenet(scorenet_cfg, cfg.seed), 0, None

    def loss_fn(m, batch, step, g):
        return score_entropy_loss(m, batch, rate, noise, g)

    def save_fn(m, opt, step, path):
        ckpt_io.save_trained(
            path, "discrete", m, dataset.vocab, cfg.to_dict(), step, noise=noise, rate=rate, optimizer=opt
        )

    summary = run_loop(
        model, loss_fn, dataset, cfg,
        save_fn=save_fn if out_dir is not None else None,
        out_dir=out_dir, start_step=start_step, opt_state=opt_state, log_every=log_every,
    )
    summary["model"] = model
    return summary

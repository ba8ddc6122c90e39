"""The trainable denoiser: a small bidirectional transformer encoder.

Maps a noisy latent (plus timestep, region mask, and an optional
self-conditioning channel) to a prediction of the clean latent. The token
embedding table lives inside the module and doubles as the rounding head's
weight matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .textspace import EmbeddingTable

__all__ = ["DenoiserConfig", "DenoiserInput", "Denoiser", "init_denoiser", "denoise", "sinusoidal_embedding"]

# Recorded so checkpoints can state how weights were drawn.
INIT_SCHEME = {
    "token_embedding": "normal(0, 1)",
    "linear_weight": "normal(0, 0.02)",
    "position_embedding": "normal(0, 0.02)",
    "segment_embedding": "normal(0, 0.02)",
    "bias": "zeros",
    "layernorm": "weight=1, bias=0",
}


@dataclass
class DenoiserConfig:
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    max_len: int = 64
    vocab_size: int = 0
    embed_dim: int = 32
    self_conditioning: bool = True
    dropout: float = 0.0

    def validate(self) -> "DenoiserConfig":
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be set")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.layers, self.model_dim, self.ff_dim, self.max_len, self.embed_dim) < 1:
            raise ValueError("all size fields must be positive")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class DenoiserInput:
    z_t: torch.Tensor  # (B, L, d) or (L, d)
    t: float | torch.Tensor
    mask: torch.Tensor  # (B, L) or (L,)
    self_cond: torch.Tensor | None = None


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos embedding; t may be fractional (continuous timesteps)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / max(half - 1, 1)
    )
    args = t[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


class Block(nn.Module):
    """Pre-LN transformer block with full bidirectional attention."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.model_dim
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.ff1 = nn.Linear(d, cfg.ff_dim)
        self.ff2 = nn.Linear(cfg.ff_dim, d)
        self.dropout = cfg.dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, L, self.heads, -1).transpose(1, 2)
        k = k.view(B, L, self.heads, -1).transpose(1, 2)
        v = v.view(B, L, self.heads, -1).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v, dropout_p=self.dropout if self.training else 0.0)
        x = x + self.attn_out(a.transpose(1, 2).reshape(B, L, d))
        h = self.ln2(x)
        h = self.ff2(F.gelu(self.ff1(h)))
        if self.dropout > 0:
            h = F.dropout(h, p=self.dropout, training=self.training)
        return x + h


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d_in = cfg.embed_dim * (2 if cfg.self_conditioning else 1)
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.embed_dim)
        self.in_proj = nn.Linear(d_in, cfg.model_dim)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, cfg.model_dim))
        self.region_emb = nn.Embedding(2, cfg.model_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.model_dim), nn.SiLU(), nn.Linear(cfg.model_dim, cfg.model_dim)
        )
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.final_ln = nn.LayerNorm(cfg.model_dim)
        self.out_proj = nn.Linear(cfg.model_dim, cfg.embed_dim)

    @property
    def table(self) -> EmbeddingTable:
        return EmbeddingTable(weights=self.tok_emb.weight)

    def forward(self, z_t: torch.Tensor, t, mask: torch.Tensor, self_cond: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = z_t.dim() == 2
        if squeeze:
            z_t = z_t.unsqueeze(0)
            mask = mask.unsqueeze(0)
            if self_cond is not None:
                self_cond = self_cond.unsqueeze(0)
        B, L, _ = z_t.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")

        if self.cfg.self_conditioning:
            if self_cond is None:
                self_cond = torch.zeros_like(z_t)
            x = torch.cat([z_t, self_cond], dim=-1)
        else:
            x = z_t
        h = self.in_proj(x) + self.pos_emb[:L].to(z_t.dtype)

        if not isinstance(t, torch.Tensor):
            t = torch.tensor([float(t)], dtype=z_t.dtype, device=z_t.device)
        t = t.to(z_t.dtype).reshape(-1)
        if t.numel() == 1 and B > 1:
            t = t.expand(B)
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.model_dim))
        h = h + temb[:, None, :] + self.region_emb(mask.long())

        for block in self.blocks:
            h = block(h)
        out = self.out_proj(self.final_ln(h))
        if not torch.isfinite(out).all():
            raise FloatingPointError("non-finite denoiser output (training divergence signal)")
        return out.squeeze(0) if squeeze else out


def init_denoiser(cfg: DenoiserConfig, seed: int) -> Denoiser:
    """Instantiate and initialize deterministically: same seed, same bits."""
    model = Denoiser(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.tok_emb.weight.normal_(0.0, 1.0, generator=g)
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


def denoise(model: Denoiser, inp: DenoiserInput) -> torch.Tensor:
    """Predicted clean latent ẑ_0; deterministic in eval mode."""
    return model(inp.z_t, inp.t, inp.mask, inp.self_cond)

"""Vocabulary, tokenization and the token/latent interface.

Tokenization is closed-vocabulary: digits are always single-character tokens,
multi-character symbols (``<<``, ``>>``, ``####``) and alphabetic words are
atomic, and anything unknown falls back to UNK. Latents and tokens are bridged
by a shared embedding table: ``embed`` looks rows up, ``round_latents`` maps a
latent back to token ids through dot-product logits against the same table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

__all__ = [
    "PAD", "EOS", "SEP", "MASK", "UNK", "DIGITS",
    "Vocabulary", "EmbeddingTable", "SeqPair",
    "tokenize", "detokenize", "embed", "round_latents",
    "concat_pair", "parse_answer",
]

PAD = "<pad>"
EOS = "<eos>"
SEP = "<sep>"
MASK = "<mask>"
UNK = "<unk>"
SPECIALS = (PAD, EOS, SEP, MASK, UNK)
DIGITS = tuple(str(d) for d in range(10))

# Longest-match-first: multi-char symbols, then words, then single digits,
# then any other non-space character.
_TOKEN_RE = re.compile(r"<<|>>|####|<pad>|<eos>|<sep>|<mask>|<unk>|[A-Za-z]+|[0-9]|\S")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory with fixed special-token slots."""

    tokens: tuple[str, ...]
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for sp in SPECIALS:
            if self.tokens.count(sp) != 1:
                raise ValueError(f"special token {sp!r} must appear exactly once")
        for d in DIGITS:
            if d not in self.tokens:
                raise ValueError(f"digit {d!r} missing from vocabulary")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, tok: str) -> int:
        idx = self._index.get(tok)
        return self._index[UNK] if idx is None else idx

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def mask_id(self) -> int:
        return self._index[MASK]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        """Closed vocabulary: specials, digits, then every symbol seen in ``texts``."""
        seen: dict[str, None] = {}
        for text in texts:
            for tok in _TOKEN_RE.findall(text):
                if tok not in SPECIALS and tok not in DIGITS:
                    seen[tok] = None
        return cls(tokens=SPECIALS + DIGITS + tuple(sorted(seen)))

    def serialize(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def deserialize(cls, blob: dict) -> "Vocabulary":
        return cls(tokens=tuple(blob["tokens"]))


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Split ``text`` into token ids; digits become single-digit tokens."""
    return [vocab.id_of(tok) for tok in _TOKEN_RE.findall(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` up to whitespace: adjacent digits re-join."""
    out: list[str] = []
    prev_digit = False
    for i in ids:
        tok = vocab.tokens[int(i)]
        is_digit = tok in DIGITS
        if out and not (prev_digit and is_digit):
            out.append(" ")
        out.append(tok)
        prev_digit = is_digit
    return "".join(out)


@dataclass
class EmbeddingTable:
    """V×d table shared between embedding lookup and rounding logits."""

    weights: torch.Tensor

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _as_long(tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens.long()
    return torch.tensor(tokens, dtype=torch.long)


def embed(tokens, table: EmbeddingTable) -> torch.Tensor:
    """Row lookup: output[i] == table.weights[tokens[i]]."""
    ids = _as_long(tokens)
    if ids.numel() > 0 and (ids.max() >= table.vocab_size or ids.min() < 0):
        raise ValueError(f"token id out of range for vocabulary of size {table.vocab_size}")
    return table.weights[ids]


def round_latents(
    z: torch.Tensor, table: EmbeddingTable, logit_temperature: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Map latents back to tokens via shared-table dot-product logits.

    Returns (argmax token ids over the last position axis, the full logit
    tensor). Positive temperature only rescales logits, never the argmax.
    """
    if logit_temperature <= 0:
        raise ValueError(f"logit_temperature must be positive, got {logit_temperature}")
    logits = z @ table.weights.to(z.dtype).T / logit_temperature
    return logits.argmax(dim=-1), logits


@dataclass(frozen=True)
class SeqPair:
    """A condition/target pair laid out as one sequence with a noising mask.

    ``mask`` is 0 on the condition span (the first ``x_len`` positions) and 1
    everywhere else, PAD tail included: padding lives in the generated region.
    """

    tokens: torch.Tensor  # (L,) long
    mask: torch.Tensor  # (L,) long, 0 = condition, 1 = noised
    x_len: int


def concat_pair(x_tokens, y_tokens, L: int, vocab: Vocabulary) -> SeqPair:
    """Lay out [x ; y], right-padded to length L with PAD in the noised region."""
    x = list(x_tokens)
    y = list(y_tokens)
    if len(x) + len(y) > L:
        raise ValueError(f"combined length {len(x) + len(y)} exceeds L={L}")
    tokens = torch.full((L,), vocab.pad_id, dtype=torch.long)
    if x:
        tokens[: len(x)] = _as_long(x)
    if y:
        tokens[len(x) : len(x) + len(y)] = _as_long(y)
    mask = torch.ones(L, dtype=torch.long)
    mask[: len(x)] = 0
    return SeqPair(tokens=tokens, mask=mask, x_len=len(x))


def parse_answer(decoded_text: str) -> str:
    """Text after the last '####' delimiter, trimmed; empty if absent."""
    head, sep, tail = decoded_text.rpartition("####")
    if not sep:
        return ""
    return tail.strip()

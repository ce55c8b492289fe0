"""Discrete captions <-> continuous latents.

Captions are lowercased and split on whitespace and punctuation, wrapped
as ``<start> w_1 .. w_k <end>`` and right-padded with ``<pad>`` to a fixed
length ``n``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
RESERVED = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = range(4)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]
    stoi: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.itos[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "stoi", stoi)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def words(self) -> tuple[str, ...]:
        return self.itos[len(RESERVED):]

    def encode(self, tokens: Sequence[str], length: int) -> list[int]:
        """``<start> tokens <end> <pad>...`` as ids; over-long captions are truncated."""
        ids = [START_ID] + [self.stoi.get(tok, UNK_ID) for tok in tokens]
        ids = ids[: length - 1] + [END_ID]
        return ids + [PAD_ID] * (length - len(ids))

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Inverse of :meth:`encode`: stop at the first ``<end>``, drop ``<start>``/``<pad>``."""
        out = []
        for i in ids:
            i = int(i)
            if i == END_ID:
                break
            if i in (PAD_ID, START_ID):
                continue
            out.append(self.itos[i])
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(tuple(Path(path).read_text().splitlines()))


def build_vocab(corpus: Iterable[Sequence[str]]) -> Vocabulary:
    """Every distinct token gets an id in first-seen order; no frequency cutoff."""
    seen: dict[str, None] = {}
    n_captions = 0
    for caption in corpus:
        n_captions += 1
        for tok in caption:
            if tok not in RESERVED:
                seen.setdefault(tok, None)
    if n_captions == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(RESERVED + tuple(seen))


class WordEmbedding(nn.Module):
    """Trainable ``V x d`` table mapping token ids to latent rows."""

    def __init__(self, vocab_size: int, dim: int = 16):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(vocab_size, dim))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return embed(ids, self.weight)


class Rounding(nn.Module):
    """Linear ``d -> V`` projection whose softmax is ``p(w_i | x_0,i)``."""

    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.proj = nn.Linear(dim, vocab_size)

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        return self.proj(x0)


def embed(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {table.shape[0]}")
    return table[ids]


def noise_words(emb: torch.Tensor, alpha0: float, eps: torch.Tensor) -> torch.Tensor:
    """Sample ``x_0 ~ N(Emb(w), (1 - alpha0) I)`` given the standard draw ``eps``."""
    if not 0.0 < alpha0 <= 1.0:
        raise ValueError(f"alpha0 must lie in (0, 1], got {alpha0}")
    if eps.shape != emb.shape:
        raise ValueError(f"shape mismatch: {tuple(emb.shape)} vs {tuple(eps.shape)}")
    return emb + math.sqrt(1.0 - alpha0) * eps


def round_to_tokens(x0: torch.Tensor, rounding: Rounding) -> tuple[torch.Tensor, torch.Tensor]:
    """Argmax token per position and the softmax rows it was taken from.

    Ties resolve to the lowest id.
    """
    logits = rounding(x0)
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite rounding logits")
    probs = torch.softmax(logits, dim=-1)
    ids = first_argmax(logits)
    return ids, probs


def first_argmax(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the last axis, lowest index on ties."""
    is_max = logits == logits.max(dim=-1, keepdim=True).values
    idx = torch.arange(logits.shape[-1], device=logits.device)
    return torch.where(is_max, idx, logits.shape[-1]).min(dim=-1).values


def rounding_nll(x0: torch.Tensor, ids: torch.Tensor, rounding: Rounding) -> torch.Tensor:
    """Mean ``-log p(w_i | x_0,i)`` over all positions (padding included)."""
    logits = rounding(x0)
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), ids.reshape(-1), reduction="mean"
    )

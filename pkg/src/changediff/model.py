"""Trainable parts of the captioner bundled into one module."""

from __future__ import annotations

import torch
from torch import nn

from .denoiser import ConditionDenoiser, DenoiserConfig
from .textspace import Rounding, WordEmbedding


class CaptionDiffusion(nn.Module):
    """Word embedding, rounding head and condition denoiser.

    The image backbone is kept outside: it is frozen by default and its
    residual features are usually precomputed once per dataset.
    """

    def __init__(self, cfg: DenoiserConfig, vocab_size: int, tie_rounding: bool = False):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tie_rounding = tie_rounding
        self.embedding = WordEmbedding(vocab_size, cfg.word_dim)
        self.rounding = Rounding(cfg.word_dim, vocab_size)
        if tie_rounding:
            self.rounding.proj.weight = self.embedding.weight
        self.denoiser = ConditionDenoiser(cfg)

    def denoise(self, x_t, t, idi):
        return self.denoiser(x_t, t, idi)

    def nearest_rows(self, x: torch.Tensor) -> torch.Tensor:
        """Snap every latent row to its nearest embedding row (Euclidean)."""
        table = self.embedding.weight.to(x.dtype)
        dist = torch.cdist(x.reshape(-1, x.shape[-1]), table)
        return table[dist.argmin(dim=-1)].reshape(x.shape)

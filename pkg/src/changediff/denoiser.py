"""Condition denoiser ``f(x_t, t, I_di) -> x0_hat``.

Layout::

    x_emb   = TextProj(x_t)  + PE(n)  + TE(t)
    idi_emb = ImageProj(I_di) + PE(HW) + TE(t)
    x_c     = MHA(q=x_emb, k=v=idi_emb)              # cross-mode fusion
    x_fus   = LN(x_c + Drop(FC(ReLU(FC(x_c)))))
    repeat ssa_depth times:
        x_i   = MHA(q=k=v=x)                          # no output projection
        x_res = LN(Drop(FC(x_i)) + x_i)
        x_act = GeLU(FC(x_res))
        x     = LN(x_act + Drop(FC(x_act)))
    x0_hat  = OutProj(x)

Attention is scaled dot-product with ``1/sqrt(d_model/heads)`` and no mask.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .schedule import NoiseSchedule, posterior_variance


@dataclass
class DenoiserConfig:
    seq_len: int = 40
    image_tokens: int = 64
    word_dim: int = 16
    image_channels: int = 2048
    d_model: int = 256
    heads: int = 8
    ssa_depth: int = 3
    ffn_dim: int = 0  # 0 -> 4 * d_model
    dropout: float = 0.1
    attn_residual: bool = False  # add the attention input back onto its output

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal encodings")
        if self.ssa_depth < 1:
            raise ValueError(f"ssa_depth must be >= 1, got {self.ssa_depth}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


def _sinusoid(positions: np.ndarray, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    i = np.arange(d_model // 2, dtype=np.float64)
    angles = np.asarray(positions, dtype=np.float64)[..., None] / 10000.0 ** (2.0 * i / d_model)
    out = np.empty(angles.shape[:-1] + (d_model,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """``(length, d_model)`` table; even columns sin, odd columns cos."""
    return _sinusoid(np.arange(length), d_model)


def time_encoding(t, d_model: int) -> np.ndarray:
    """Same sinusoid with the diffusion step in place of the position."""
    return _sinusoid(np.asarray(t), d_model)


def _time_encoding_torch(t: torch.Tensor, d_model: int, dtype) -> torch.Tensor:
    i = torch.arange(d_model // 2, dtype=torch.float64, device=t.device)
    angles = t.to(torch.float64)[:, None] / 10000.0 ** (2.0 * i / d_model)
    out = torch.stack((torch.sin(angles), torch.cos(angles)), dim=-1).flatten(1)
    return out.to(dtype)


def multi_head_attention(q, k, v, heads: int):
    """Scaled dot-product attention on already-projected ``(B, L, D)`` inputs.

    Returns the concatenated head outputs and weights of shape ``(B, h, Lq, Lk)``.
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    dh = D // heads
    qh = q.view(B, Lq, heads, dh).transpose(1, 2)
    kh = k.view(B, Lk, heads, dh).transpose(1, 2)
    vh = v.view(B, Lk, heads, dh).transpose(1, 2)
    weights = torch.softmax(qh @ kh.transpose(-2, -1) / math.sqrt(dh), dim=-1)
    out = (weights @ vh).transpose(1, 2).reshape(B, Lq, D)
    return out, weights


class CrossModeFusion(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D = cfg.d_model
        self.heads = cfg.heads
        self.residual = cfg.attn_residual
        self.wq = nn.Linear(D, D)
        self.wk = nn.Linear(D, D)
        self.wv = nn.Linear(D, D)
        self.wo = nn.Linear(D, D)
        self.fc1 = nn.Linear(D, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, D)
        self.norm = nn.LayerNorm(D)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x_emb, idi_emb, return_attn: bool = False):
        heads, weights = multi_head_attention(
            self.wq(x_emb), self.wk(idi_emb), self.wv(idi_emb), self.heads
        )
        x_c = self.wo(heads)
        if self.residual:
            x_c = x_c + x_emb
        x_proj = self.fc2(F.relu(self.fc1(x_c)))
        x_fus = self.norm(x_c + self.drop(x_proj))
        return (x_fus, weights) if return_attn else x_fus


class SelfAttentionLayer(nn.Module):
    """One stacked self-attention layer followed by its complementary block."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        D = cfg.d_model
        self.heads = cfg.heads
        self.residual = cfg.attn_residual
        self.wq = nn.Linear(D, D)
        self.wk = nn.Linear(D, D)
        self.wv = nn.Linear(D, D)
        self.fc_res = nn.Linear(D, D)
        self.norm_res = nn.LayerNorm(D)
        self.fc_act = nn.Linear(D, D)
        self.fc_out = nn.Linear(D, D)
        self.norm_out = nn.LayerNorm(D)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, return_attn: bool = False):
        x_i, weights = multi_head_attention(self.wq(x), self.wk(x), self.wv(x), self.heads)
        if self.residual:
            x_i = x_i + x
        x_res = self.norm_res(self.drop(self.fc_res(x_i)) + x_i)
        x_act = F.gelu(self.fc_act(x_res))
        out = self.norm_out(x_act + self.drop(self.fc_out(x_act)))
        return (out, weights) if return_attn else out


class ConditionDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.text_proj = nn.Linear(cfg.word_dim, D)
        self.image_proj = nn.Linear(cfg.image_channels, D)
        self.cmf = CrossModeFusion(cfg)
        self.ssa = nn.ModuleList(SelfAttentionLayer(cfg) for _ in range(cfg.ssa_depth))
        self.out_proj = nn.Linear(D, cfg.word_dim)
        self.register_buffer(
            "pe_text", torch.from_numpy(positional_encoding(cfg.seq_len, D)), persistent=False
        )
        self.register_buffer(
            "pe_image", torch.from_numpy(positional_encoding(cfg.image_tokens, D)), persistent=False
        )

    def _check(self, x_t, idi):
        c = self.cfg
        if x_t.ndim != 3 or tuple(x_t.shape[1:]) != (c.seq_len, c.word_dim):
            raise ValueError(f"x_t must be (B, {c.seq_len}, {c.word_dim}), got {tuple(x_t.shape)}")
        if idi.ndim != 3 or tuple(idi.shape[1:]) != (c.image_tokens, c.image_channels):
            raise ValueError(
                f"I_di must be (B, {c.image_tokens}, {c.image_channels}), got {tuple(idi.shape)}"
            )
        if idi.shape[0] != x_t.shape[0]:
            raise ValueError("batch size mismatch between x_t and I_di")

    def embed_inputs(self, x_t, t, idi):
        self._check(x_t, idi)
        t = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(x_t.shape[0])
        te = _time_encoding_torch(t, self.cfg.d_model, x_t.dtype)[:, None, :]
        x_emb = self.text_proj(x_t) + self.pe_text.to(x_t.dtype) + te
        idi_emb = self.image_proj(idi) + self.pe_image.to(x_t.dtype) + te
        return x_emb, idi_emb

    def forward(self, x_t, t, idi, return_attn: bool = False):
        """``x_t (B, n, d)``, ``t`` int or ``(B,)``, ``idi (B, HW, C)`` -> ``x0_hat (B, n, d)``."""
        x_emb, idi_emb = self.embed_inputs(x_t, t, idi)
        x, cmf_attn = self.cmf(x_emb, idi_emb, return_attn=True)
        ssa_attn = []
        for layer in self.ssa:
            x, w = layer(x, return_attn=True)
            ssa_attn.append(w)
        x0_hat = self.out_proj(x)
        if return_attn:
            return x0_hat, {"cmf": cmf_attn, "ssa": ssa_attn}
        return x0_hat


def step_coefficients(t, sched: NoiseSchedule, dtype=torch.float32, device=None):
    """Per-example ``(c_xt, c_x0, sigma2)`` of the reverse step as ``(B, 1, 1)`` tensors."""
    steps = np.atleast_1d(np.asarray(t.cpu() if torch.is_tensor(t) else t)).astype(int)
    rows = [sched.posterior_coefficients(int(s)) for s in steps]
    c = torch.tensor(rows, dtype=torch.float64)
    var = torch.tensor([posterior_variance(int(s), sched) for s in steps], dtype=torch.float64)
    shape = (-1, 1, 1)
    return (
        c[:, 0].view(shape).to(dtype=dtype, device=device),
        c[:, 1].view(shape).to(dtype=dtype, device=device),
        var.view(shape).to(dtype=dtype, device=device),
    )


def reverse_mean(x_t, t: int, x0_hat, sched: NoiseSchedule):
    """Mean of ``p(x_{t-1} | x_t)`` with the network prediction in place of ``x_0``."""
    if tuple(x_t.shape) != tuple(x0_hat.shape):
        raise ValueError(f"shape mismatch: {tuple(x_t.shape)} vs {tuple(x0_hat.shape)}")
    c_xt, c_x0 = sched.posterior_coefficients(t)
    return c_xt * x_t + c_x0 * x0_hat

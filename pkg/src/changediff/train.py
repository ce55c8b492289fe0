"""Training objective and optimisation loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import nn

from .model import CaptionDiffusion
from .schedule import NoiseSchedule
from .textspace import noise_words, rounding_nll

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 564
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: float = 1.0  # 0 disables clipping
    seed: int = 0
    max_steps: int = 0  # 0 -> run all epochs
    warmup_steps: int = 0
    lr_decay: str = "none"  # none | linear
    checkpoint_every: int = 0
    deterministic: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ValueError("lr, weight_decay and grad_clip must be non-negative")
        if self.lr_decay not in ("none", "linear"):
            raise ValueError(f"lr_decay must be 'none' or 'linear', got {self.lr_decay!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class LossBreakdown:
    l_T: torch.Tensor
    l_mse: torch.Tensor
    l_round: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_T + self.l_mse + self.l_round

    def as_floats(self) -> dict[str, float]:
        return {
            "l_T": self.l_T.item(),
            "l_mse": self.l_mse.item(),
            "l_round": self.l_round.item(),
            "total": self.total.item(),
        }


def alpha_bar_at(t: torch.Tensor, sched: NoiseSchedule, dtype) -> torch.Tensor:
    """``alpha_bar_t`` gathered per example, shaped ``(B, 1, 1)``."""
    if int(t.min()) < 1 or int(t.max()) > sched.T:
        raise ValueError(f"steps must lie in 1..{sched.T}")
    table = torch.tensor(sched.alpha_bars)
    return table[t.cpu().long() - 1].to(dtype=dtype, device=t.device).view(-1, 1, 1)


def training_loss(
    model: CaptionDiffusion,
    ids: torch.Tensor,
    idi: torch.Tensor,
    t: torch.Tensor,
    eps0: torch.Tensor,
    eps_t: torch.Tensor,
    sched: NoiseSchedule,
    denoise: Callable | None = None,
) -> LossBreakdown:
    """One Monte-Carlo draw of the objective for a batch.

    ``ids (B, n)``, ``idi (B, HW, C)``, ``t (B,)`` with values in ``1..T``;
    ``eps0``/``eps_t`` are standard normal draws shaped like the latents.
    At ``t == 1`` the prediction is regressed onto ``Emb(w)`` instead of
    ``x_0``.  ``denoise`` overrides the model's denoiser (used by tests).
    """
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    emb = model.embedding(ids)
    x0 = noise_words(emb, sched.alpha0, eps0)
    ab = alpha_bar_at(t, sched, x0.dtype)
    x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps_t
    x0_hat = (denoise or model.denoise)(x_t, t, idi)

    ab_T = float(sched.alpha_bar(sched.T))
    l_T = (ab_T * x0.pow(2)).mean()
    target = torch.where((t == 1).view(-1, 1, 1), emb, x0)
    l_mse = (x0_hat - target).pow(2).mean()
    l_round = rounding_nll(x0, ids, model.rounding)
    return LossBreakdown(l_T, l_mse, l_round)


def draw_noise(ids: torch.Tensor, model: CaptionDiffusion, sched: NoiseSchedule, gen: torch.Generator):
    """Sample ``(t, eps0, eps_t)`` for a batch from ``gen``."""
    B, n = ids.shape
    d = model.cfg.word_dim
    dtype = model.embedding.weight.dtype
    t = torch.randint(1, sched.T + 1, (B,), generator=gen)
    eps0 = torch.randn((B, n, d), generator=gen, dtype=dtype)
    eps_t = torch.randn((B, n, d), generator=gen, dtype=dtype)
    return t, eps0, eps_t


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)


def _lr_lambda(cfg: TrainConfig, total_steps: int):
    def factor(step: int) -> float:
        f = 1.0
        if cfg.warmup_steps:
            f = min(1.0, (step + 1) / cfg.warmup_steps)
        if cfg.lr_decay == "linear" and total_steps > 0:
            f *= max(0.0, 1.0 - step / total_steps)
        return f

    return factor


def train(
    model: CaptionDiffusion,
    ids: torch.Tensor,
    idi: torch.Tensor,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    log_file=None,
    on_checkpoint: Callable[[int], None] | None = None,
    residual_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
    extra_params=(),
) -> list[dict]:
    """Optimise all parameters of ``model`` on ``(ids, idi)``.

    ``ids (N, n)`` are encoded captions and ``idi (N, HW, C)`` their
    residual features.  When the backbone is fine-tuned, pass
    ``residual_fn(index) -> idi batch`` instead (``idi`` is then ignored)
    and the backbone weights as ``extra_params``.
    Returns the per-step metrics records (also written to ``log_file`` as
    JSON lines).
    """
    N = ids.shape[0]
    if N == 0:
        raise ValueError("empty training set")
    if residual_fn is None and idi.shape[0] != N:
        raise ValueError(f"{N} captions but {idi.shape[0]} residual maps")
    if int(ids.max()) >= model.vocab_size:
        raise ValueError("caption ids exceed the model vocabulary")

    set_deterministic(cfg.seed, cfg.deterministic)
    gen = torch.Generator().manual_seed(cfg.seed)
    steps_per_epoch = math.ceil(N / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps:
        total = min(total, cfg.max_steps)

    params = [p for p in model.parameters() if p.requires_grad] + list(extra_params)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    lr_sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(cfg, total))
    model.train()

    records = []
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(N, generator=gen)
        for start in range(0, N, cfg.batch_size):
            if step >= total:
                break
            index = order[start:start + cfg.batch_size]
            batch_ids = ids[index]
            batch_idi = residual_fn(index) if residual_fn else idi[index]
            t, eps0, eps_t = draw_noise(batch_ids, model, sched, gen)
            losses = training_loss(model, batch_ids, batch_idi, t, eps0, eps_t, sched)
            total_loss = losses.total
            if not torch.isfinite(total_loss):
                raise DivergenceError(
                    f"non-finite loss at step {step} (epoch {epoch}): {losses.as_floats()}",
                    step=step,
                )
            opt.zero_grad(set_to_none=True)
            total_loss.backward()
            if cfg.grad_clip:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            lr = opt.param_groups[0]["lr"]
            opt.step()
            lr_sched.step()
            step += 1

            record = {"step": step, "epoch": epoch, **losses.as_floats(), "lr": lr}
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if step % 100 == 0:
                log.info("step %d epoch %d total %.4f", step, epoch, record["total"])
            if on_checkpoint and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                on_checkpoint(step)
        if step >= total:
            break
    model.eval()
    return records


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

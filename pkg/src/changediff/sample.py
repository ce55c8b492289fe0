"""Ancestral sampling from pure noise down to a caption."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .denoiser import step_coefficients
from .model import CaptionDiffusion
from .schedule import NoiseSchedule
from .textspace import Vocabulary, round_to_tokens
from .train import DivergenceError


@dataclass
class SampleOptions:
    strict_paper_variance: bool = False  # add Sigma(t) * eps instead of sqrt(Sigma(t)) * eps
    clamp: bool = False  # snap x0_hat to the nearest embedding row at every step
    add_noise: bool = True
    trace: bool = False


@dataclass
class SampleResult:
    ids: list[int]
    caption: str
    x0: torch.Tensor
    trace: list[tuple[int, float, float]] = field(default_factory=list)


def item_seed(seed: int, item_id) -> int:
    """Stable per-item stream seed; independent of batch composition."""
    digest = hashlib.sha256(f"{seed}:{item_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def sample_latents(
    model: CaptionDiffusion,
    idi: torch.Tensor,
    sched: NoiseSchedule,
    generators: Sequence[torch.Generator],
    options: SampleOptions = SampleOptions(),
    denoise: Callable | None = None,
):
    """Run the reverse chain for a batch of residual maps ``idi (B, HW, C)``.

    Item ``b`` draws every Gaussian from ``generators[b]`` alone, so its
    result does not depend on the rest of the batch.  Returns ``x_0`` of
    shape ``(B, n, d)`` and a trace of ``(t, max|x_t|, rms(x_t))`` rows per
    item (empty unless ``options.trace``).
    """
    cfg = model.cfg
    B = idi.shape[0]
    if len(generators) != B:
        raise ValueError(f"{B} items but {len(generators)} generators")
    dtype = next(model.parameters()).dtype
    denoise = denoise or model.denoise
    shape = (cfg.seq_len, cfg.word_dim)

    def draw():
        return torch.stack([torch.randn(shape, generator=g, dtype=dtype) for g in generators])

    traces = [[] for _ in range(B)]
    x = draw()
    idi = idi.to(dtype)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            if options.trace:
                for b in range(B):
                    traces[b].append((t, float(x[b].abs().max()), float(x[b].pow(2).mean().sqrt())))
            x0_hat = denoise(x, torch.full((B,), t, dtype=torch.long), idi)
            if options.clamp:
                x0_hat = model.nearest_rows(x0_hat)
            c_xt, c_x0, var = step_coefficients(t, sched, dtype=dtype)
            mean = c_xt * x + c_x0 * x0_hat
            eps = draw() if t > 1 else None
            if t > 1 and options.add_noise:
                scale = var if options.strict_paper_variance else var.sqrt()
                x = mean + scale * eps
            else:
                x = mean
            if not torch.isfinite(x).all():
                raise DivergenceError(f"non-finite latent at sampling step {t}", step=t)
    return x, traces


def sample_caption(
    model: CaptionDiffusion,
    idi: torch.Tensor,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    generator: torch.Generator,
    options: SampleOptions = SampleOptions(),
    denoise: Callable | None = None,
) -> SampleResult:
    """Sample one caption for a single residual map ``idi (HW, C)``."""
    return _finish(model, vocab, *sample_latents(model, idi[None], sched, [generator], options, denoise))[0]


def batch_sample(
    model: CaptionDiffusion,
    idi: torch.Tensor,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    seed: int,
    item_ids: Sequence,
    options: SampleOptions = SampleOptions(),
    batch_size: int = 64,
) -> list[SampleResult]:
    """Sample one caption per item, each from its own ``item_seed(seed, id)`` stream."""
    if len(item_ids) != idi.shape[0]:
        raise ValueError(f"{idi.shape[0]} residual maps but {len(item_ids)} item ids")
    results = []
    for start in range(0, len(item_ids), batch_size):
        chunk = list(item_ids[start:start + batch_size])
        gens = [torch.Generator().manual_seed(item_seed(seed, i)) for i in chunk]
        x0, traces = sample_latents(model, idi[start:start + len(chunk)], sched, gens, options)
        results.extend(_finish(model, vocab, x0, traces))
    return results


def _finish(model, vocab, x0, traces) -> list[SampleResult]:
    with torch.no_grad():
        ids, _ = round_to_tokens(x0, model.rounding)
    out = []
    for b in range(x0.shape[0]):
        row = ids[b].tolist()
        out.append(SampleResult(row, " ".join(vocab.decode(row)), x0[b], traces[b]))
    return out

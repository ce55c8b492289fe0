"""Conditional text diffusion for describing changes between image pairs."""

from .denoiser import ConditionDenoiser, DenoiserConfig, reverse_mean
from .model import CaptionDiffusion
from .schedule import NoiseSchedule, build_schedule, posterior_mean, posterior_variance
from .textspace import Vocabulary, build_vocab, tokenize

__all__ = [
    "CaptionDiffusion",
    "ConditionDenoiser",
    "DenoiserConfig",
    "NoiseSchedule",
    "Vocabulary",
    "build_schedule",
    "build_vocab",
    "posterior_mean",
    "posterior_variance",
    "reverse_mean",
    "tokenize",
]

__version__ = "0.1.0"

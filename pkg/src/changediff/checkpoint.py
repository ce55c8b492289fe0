"""Checkpoint directories.

A checkpoint is a directory holding::

    weights.safetensors   flat name -> tensor archive of all trainable weights
    vocab.txt             one token per line, line number = id
    schedule.txt          key = value schedule description
    manifest.json         denoiser config, tensor shapes, hashes, step count
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from .denoiser import DenoiserConfig
from .model import CaptionDiffusion
from .schedule import NoiseSchedule, load_schedule
from .textspace import Vocabulary

WEIGHTS = "weights.safetensors"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(
    directory,
    model: CaptionDiffusion,
    vocab: Vocabulary,
    sched: NoiseSchedule,
    step: int,
    extra: dict | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone().contiguous() for k, v in model.state_dict().items()}
    save_file(state, str(directory / WEIGHTS))
    vocab.save(directory / "vocab.txt")
    sched.save(directory / "schedule.txt")
    denoiser_cfg = asdict(model.cfg)
    manifest = {
        "step": step,
        "denoiser": denoiser_cfg,
        "tie_rounding": model.tie_rounding,
        "vocab_size": len(vocab),
        "config_hash": config_hash(denoiser_cfg),
        "vocab_hash": vocab.digest(),
        "schedule": sched.to_text(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "weights_sha256": file_hash(directory / WEIGHTS),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> tuple[CaptionDiffusion, Vocabulary, NoiseSchedule, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").is_file() or not (directory / WEIGHTS).is_file():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    manifest = json.loads((directory / "manifest.json").read_text())
    vocab = Vocabulary.load(directory / "vocab.txt")
    if vocab.digest() != manifest["vocab_hash"]:
        raise ValueError(f"vocabulary in {directory} does not match its manifest")
    sched = load_schedule(directory / "schedule.txt")
    cfg = DenoiserConfig(**manifest["denoiser"])
    model = CaptionDiffusion(cfg, len(vocab), tie_rounding=manifest.get("tie_rounding", False))
    state = load_file(str(directory / WEIGHTS))
    model.load_state_dict(state)
    model.to(next(iter(state.values())).dtype)
    model.eval()
    return model, vocab, sched, manifest

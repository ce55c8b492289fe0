"""Run configuration: one INI file, flat namespaced keys.

Sections become key prefixes, so ``[denoiser] ssa_depth = 3`` is the key
``denoiser.ssa_depth`` and can be overridden with
``--set denoiser.ssa_depth=5``.  Unknown keys are errors.
"""

from __future__ import annotations

import configparser
from io import StringIO
from pathlib import Path

from .denoiser import DenoiserConfig
from .schedule import DEFAULT_ALPHA0, NoiseSchedule, build_schedule
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "schedule.kind": "sqrt",
    "schedule.T": 2000,
    "schedule.alpha0": DEFAULT_ALPHA0,
    "schedule.offset": 1e-4,
    "schedule.max_beta": 0.999,
    "schedule.beta_min": 1e-4,
    "schedule.beta_max": 0.02,
    "denoiser.seq_len": 40,
    "denoiser.word_dim": 16,
    "denoiser.d_model": 256,
    "denoiser.heads": 8,
    "denoiser.ssa_depth": 3,
    "denoiser.ffn_dim": 0,
    "denoiser.dropout": 0.1,
    "denoiser.attn_residual": False,
    "denoiser.tie_rounding": False,
    "train.epochs": 564,
    "train.batch_size": 32,
    "train.lr": 1e-4,
    "train.weight_decay": 0.0,
    "train.grad_clip": 1.0,
    "train.seed": 0,
    "train.max_steps": 0,
    "train.warmup_steps": 0,
    "train.lr_decay": "none",
    "train.checkpoint_every": 0,
    "train.deterministic": True,
    "train.dtype": "float32",
    "backbone.kind": "toy",
    "backbone.weights": "",
    "backbone.finetune": False,
    "backbone.seed": 0,
    "data.kind": "toy",
    "data.root": "data/toy",
    "data.train_size": 64,
    "data.val_size": 16,
    "data.test_size": 16,
    "data.seed": 0,
    "data.change_ratio": 0.5,
    "sample.seed": 0,
    "sample.split": "test",
    "sample.strict_paper_variance": False,
    "sample.clamp": False,
    "sample.batch_size": 64,
    "paths.run": "runs/default",
}

_SCHEDULE_PARAMS = {
    "sqrt": ("offset", "max_beta"),
    "linear_beta": ("beta_min", "beta_max"),
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for name, raw in parser.items(section):
                _set(cfg, f"{section}.{name}", raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), raw)
    return cfg


def _set(cfg: dict, key: str, raw) -> None:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _coerce(key, raw)


def section(cfg: dict, prefix: str) -> dict:
    return {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def dump_config(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for key in sorted(cfg):
        sec, name = key.split(".", 1)
        if not parser.has_section(sec):
            parser.add_section(sec)
        value = cfg[key]
        parser.set(sec, name, str(value).lower() if isinstance(value, bool) else str(value))
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def schedule_from(cfg: dict) -> NoiseSchedule:
    s = section(cfg, "schedule")
    kind = s["kind"]
    if kind not in _SCHEDULE_PARAMS:
        raise ConfigError(f"schedule.kind must be one of {sorted(_SCHEDULE_PARAMS)}, got {kind!r}")
    params = {name: s[name] for name in _SCHEDULE_PARAMS[kind]}
    try:
        return build_schedule(kind, s["T"], params, alpha0=s["alpha0"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def denoiser_from(cfg: dict, image_tokens: int, image_channels: int) -> DenoiserConfig:
    d = section(cfg, "denoiser")
    d.pop("tie_rounding")
    try:
        return DenoiserConfig(image_tokens=image_tokens, image_channels=image_channels, **d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_from(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**section(cfg, "train"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

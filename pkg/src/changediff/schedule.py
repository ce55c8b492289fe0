"""Noise schedules and the closed-form Gaussian algebra of the forward process.

All coefficient tables are float64; products of 2000 alphas underflow in
float32.  Steps are 1-indexed (``t`` in ``1..T``) and ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

KINDS = ("sqrt", "linear_beta")

DEFAULT_PARAMS = {
    "sqrt": {"offset": 1e-4, "max_beta": 0.999},
    "linear_beta": {"beta_min": 1e-4, "beta_max": 0.02},
}

DEFAULT_ALPHA0 = 1.0 - 1e-2


class ScheduleError(ValueError):
    """Invalid schedule construction or step index."""


class DegenerateScheduleError(ScheduleError):
    """Posterior is undefined because ``alpha_bar_t == 1`` (no noise up to t)."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alphas: np.ndarray
    alpha0: float = DEFAULT_ALPHA0
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64).copy()
        if alphas.ndim != 1 or alphas.shape[0] != self.T:
            raise ScheduleError(f"expected {self.T} alphas, got shape {alphas.shape}")
        if not np.all((alphas > 0.0) & (alphas <= 1.0)):
            raise ScheduleError("every alpha_t must lie in (0, 1]")
        if not 0.0 < self.alpha0 <= 1.0:
            raise ScheduleError(f"alpha0 must lie in (0, 1], got {self.alpha0}")
        alphas.setflags(write=False)
        bars = np.cumprod(alphas)
        bars.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "_bars", bars)
        object.__setattr__(self, "params", dict(self.params))

    @classmethod
    def from_alphas(cls, alphas, alpha0: float = DEFAULT_ALPHA0) -> "NoiseSchedule":
        alphas = np.asarray(alphas, dtype=np.float64)
        return cls(kind="custom", T=int(alphas.shape[0]), alphas=alphas, alpha0=alpha0)

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products, ``alpha_bars[t - 1] == prod(alphas[:t])``."""
        return self._bars

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` for ``t`` in ``0..T`` with ``alpha_bar_0 = 1``."""
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self._bars[t - 1])

    def _check_step(self, t) -> None:
        if int(t) != t or not 1 <= t <= self.T:
            raise ScheduleError(f"step {t} outside 1..{self.T}")

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """Weights ``(c_xt, c_x0)`` of the posterior mean at step ``t``."""
        a_t = self.alpha(t)
        ab_t = self.alpha_bar(t)
        ab_prev = self.alpha_bar(t - 1)
        denom = 1.0 - ab_t
        if denom <= 0.0:
            raise DegenerateScheduleError(
                f"alpha_bar_{t} == 1: the posterior at step {t} is undefined"
            )
        c_xt = np.sqrt(a_t) * (1.0 - ab_prev) / denom
        c_x0 = np.sqrt(ab_prev) * (1.0 - a_t) / denom
        return float(c_xt), float(c_x0)

    def to_text(self) -> str:
        lines = [f"kind = {self.kind}", f"T = {self.T}", f"alpha0 = {self.alpha0!r}"]
        if self.kind == "custom":
            lines.append("alphas = " + ",".join(repr(float(a)) for a in self.alphas))
        for key in sorted(self.params):
            lines.append(f"{key} = {self.params[key]!r}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def build_schedule(
    kind: str = "sqrt",
    T: int = 2000,
    params: Mapping[str, float] | None = None,
    alpha0: float = DEFAULT_ALPHA0,
) -> NoiseSchedule:
    """Build a fixed noise schedule.

    ``sqrt`` follows ``alpha_bar(s) = 1 - sqrt(s + offset)`` on ``s = t/T``,
    discretised through per-step ratios and clipped at ``max_beta`` (the
    continuous curve goes negative just before ``s = 1``).  ``linear_beta``
    spaces ``beta_t`` linearly between ``beta_min`` and ``beta_max``.
    """
    if kind not in KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    T = int(T)
    merged = dict(DEFAULT_PARAMS[kind])
    for key, value in (params or {}).items():
        if key not in merged:
            raise ScheduleError(f"unknown parameter {key!r} for schedule {kind!r}")
        merged[key] = float(value)

    if kind == "linear_beta":
        betas = np.linspace(merged["beta_min"], merged["beta_max"], T, dtype=np.float64)
    else:
        offset, max_beta = merged["offset"], merged["max_beta"]
        if offset < 0.0 or not 0.0 < max_beta < 1.0:
            raise ScheduleError("sqrt schedule needs offset >= 0 and 0 < max_beta < 1")

        def curve(s):
            return 1.0 - np.sqrt(s + offset)

        s = np.arange(T + 1, dtype=np.float64) / T
        betas = np.minimum(1.0 - curve(s[1:]) / curve(s[:-1]), max_beta)
        # once the curve crosses zero the ratio is meaningless; saturate
        betas[curve(s[1:]) <= 0.0] = max_beta
        betas[curve(s[:-1]) <= 0.0] = max_beta

    alphas = 1.0 - betas
    if not np.all((alphas > 0.0) & (alphas <= 1.0)):
        raise ScheduleError(f"parameters {merged} produce alpha_t outside (0, 1]")
    return NoiseSchedule(kind=kind, T=T, alphas=alphas, alpha0=alpha0, params=merged)


def load_schedule(path) -> NoiseSchedule:
    return parse_schedule(Path(path).read_text())


def parse_schedule(text: str) -> NoiseSchedule:
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScheduleError(f"malformed schedule line: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    try:
        kind = values.pop("kind")
        T = int(values.pop("T"))
        alpha0 = float(values.pop("alpha0", DEFAULT_ALPHA0))
    except KeyError as exc:
        raise ScheduleError(f"schedule file missing key {exc}") from None
    if kind == "custom":
        alphas = [float(a) for a in values.pop("alphas").split(",")]
        if len(alphas) != T:
            raise ScheduleError("custom schedule: T does not match the alpha list")
        return NoiseSchedule.from_alphas(alphas, alpha0=alpha0)
    return build_schedule(kind, T, {k: float(v) for k, v in values.items()}, alpha0=alpha0)


def _check_shapes(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_marginal_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Draw ``x_t ~ q(x_t | x_0)`` in one shot from the Gaussian draw ``eps``."""
    _check_shapes(x0, eps)
    sched._check_step(t)
    ab = sched.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step_sample(x_prev, t: int, eps, sched: NoiseSchedule):
    _check_shapes(x_prev, eps)
    a = sched.alpha(t)
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * eps


def posterior_mean(x_t, x0, t: int, sched: NoiseSchedule):
    """Mean of ``q(x_{t-1} | x_t, x_0)``."""
    _check_shapes(x_t, x0)
    c_xt, c_x0 = sched.posterior_coefficients(t)
    return c_xt * x_t + c_x0 * x0


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    a_t = sched.alpha(t)
    ab_t = sched.alpha_bar(t)
    if ab_t >= 1.0:
        raise DegenerateScheduleError(
            f"alpha_bar_{t} == 1: the posterior at step {t} is undefined"
        )
    return max((1.0 - a_t) * (1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab_t), 0.0)


def schedule_table(sched: NoiseSchedule) -> list[tuple[int, float, float, float]]:
    """Rows ``(t, alpha_t, alpha_bar_t, posterior_variance_t)``; NaN where degenerate."""
    rows = []
    for t in range(1, sched.T + 1):
        try:
            var = posterior_variance(t, sched)
        except DegenerateScheduleError:
            var = float("nan")
        rows.append((t, sched.alpha(t), sched.alpha_bar(t), var))
    return rows

"""Deterministic DDIM (eta = 0): schedule, inversion and sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

VARIANTS = ("standard", "paper-literal")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: tuple

    def __post_init__(self):
        a = self.alpha_bar
        if len(a) != self.T + 1 or a[0] != 1.0:
            raise ValueError("schedule needs T+1 cumulative coefficients with alpha_bar[0] == 1")
        if any(not (a[t] > a[t + 1] > 0) for t in range(self.T)):
            raise ValueError("cumulative coefficients must be strictly decreasing and positive")

    def __getitem__(self, t):
        return self.alpha_bar[t]


def build_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear betas from ``beta_start`` to ``beta_end``; alpha_bar[t] = prod_{i<=t}(1 - beta_i)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    betas = [beta_start] if T == 1 else [
        beta_start + (beta_end - beta_start) * i / (T - 1) for i in range(T)
    ]
    abar = [1.0]
    for b in betas:
        abar.append(abar[-1] * (1.0 - b))
    return NoiseSchedule(T, tuple(abar))


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 20
    t_init: int = 3
    variant: str = "standard"

    def __post_init__(self):
        # t_init = 0 is accepted: it turns the denoiser off (reconstruction checks)
        if self.T < 1 or not 0 <= self.t_init <= self.T:
            raise ValueError(f"need 0 <= t_init <= T and T >= 1, got t_init={self.t_init}, T={self.T}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown DDIM variant {self.variant!r}")


def _coeffs(schedule, t_from, t_to, variant):
    """z_to = a * z_from + b * eps for one deterministic DDIM move."""
    af, at = schedule[t_from], schedule[t_to]
    a = math.sqrt(at / af)
    b = math.sqrt(1.0 / at - 1.0) - math.sqrt(1.0 / af - 1.0)
    if variant == "standard":
        b *= math.sqrt(at)
    return a, b


class DDIM:
    """Deterministic DDIM moves under a frozen noise predictor.

    ``predictor(z, t)`` must accept a Tensor (used by :meth:`sample_from`)
    and expose ``predict(z, t)`` for plain arrays.
    """

    def __init__(self, schedule, predictor, variant="standard"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown DDIM variant {variant!r}")
        self.schedule = schedule
        self.predictor = predictor
        self.variant = variant

    @property
    def T(self):
        return self.schedule.T

    def invert_step(self, z, t):
        """z_t -> z_{t+1}, using eps(z_t, t)."""
        if not 0 <= t < self.T:
            raise ValueError(f"inversion step {t} outside [0, {self.T})")
        a, b = _coeffs(self.schedule, t, t + 1, self.variant)
        z = np.asarray(z, dtype=np.float64)
        return a * z + b * self.predictor.predict(z, t)

    def sample_step(self, z, t):
        """z_t -> z_{t-1}, using eps(z_t, t). Differentiable for Tensor input."""
        if not 1 <= t <= self.T:
            raise ValueError(f"sampling step {t} outside [1, {self.T}]")
        a, b = _coeffs(self.schedule, t, t - 1, self.variant)
        if isinstance(z, dc.Tensor):
            return dc.add(dc.scale(z, a), dc.scale(self.predictor(z, t), b))
        z = np.asarray(z, dtype=np.float64)
        return a * z + b * self.predictor.predict(z, t)

    def invert_to(self, z0, t_init):
        z = np.asarray(z0, dtype=np.float64)
        for t in range(t_init):
            z = self.invert_step(z, t)
        return z

    def sample_from(self, z, t_init):
        for t in range(t_init, 0, -1):
            z = self.sample_step(z, t)
        return z


def custom_step(z, alpha_from, alpha_to, eps, variant="standard"):
    """One DDIM move with explicit coefficients (degenerate-schedule checks)."""
    a = math.sqrt(alpha_to / alpha_from)
    b = math.sqrt(1.0 / alpha_to - 1.0) - math.sqrt(1.0 / alpha_from - 1.0)
    if variant == "standard":
        b *= math.sqrt(alpha_to)
    return a * np.asarray(z) + b * np.asarray(eps)

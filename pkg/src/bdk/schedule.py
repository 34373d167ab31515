"""Variance schedules, step plans and the closed-form forward marginal.

Indexing follows the diffusion convention: step ``t`` runs from 1 to ``T``
and step 0 is clean data. ``beta`` and ``alpha_bar`` are stored as length-T
arrays where entry ``t - 1`` belongs to step ``t``; use :meth:`NoiseSchedule.ab`
to read the cumulative product at any step including ``ab(0) == 1``.

Only the cumulative product is exposed. Some texts write it as a bare alpha;
here ``alpha_bar[t] = prod_{s <= t} (1 - beta[s])`` everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from bdk.errors import DimensionError, ValidationError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
DEFAULT_T = 1000
DESK_T = 100

DENOISE = "denoise"
INVERT = "invert"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    eta: float = 1.0
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T:
            raise ValidationError("beta and alpha_bar must have length T")
        if not np.all((self.beta > 0) & (self.beta < 1)):
            raise ValidationError("every beta must lie strictly inside (0, 1)")
        if not 0.0 <= self.eta <= 1.0:
            raise ValidationError(f"eta must be in [0, 1], got {self.eta}")
        self.beta.setflags(write=False)
        self.alpha_bar.setflags(write=False)

    def ab(self, t: int) -> float:
        """Cumulative product at step ``t``; ``ab(0) == 1``."""
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValidationError(f"step {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValidationError(f"step {t} outside [1, {self.T}]")
        return float(self.beta[t - 1])

    def ddim_sigma(self, t: int, t_prev: int, eta: float | None = None) -> float:
        """Noise scale of a DDIM jump ``t -> t_prev`` for stochasticity ``eta``."""
        eta = self.eta if eta is None else eta
        if eta == 0.0:
            return 0.0
        a_t, a_prev = self.ab(t), self.ab(t_prev)
        return eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)

    def with_eta(self, eta: float) -> "NoiseSchedule":
        return NoiseSchedule(self.T, self.beta.copy(), self.alpha_bar.copy(), eta, self.beta_start, self.beta_end)


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    eta: float = 1.0,
) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ValidationError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T, beta, alpha_bar, float(eta), float(beta_start), float(beta_end))


def make_desk_schedule(T: int = DESK_T, eta: float = 1.0) -> NoiseSchedule:
    """Shortened chain whose ``alpha_bar`` tracks the 1000-step default.

    The default endpoints are scaled by ``1000 / T`` so that step ``t`` of the
    short chain matches step ``t * 1000 / T`` of the long one and ``alpha_bar[T]``
    still reaches pure noise. ``T`` must exceed 20 so the last beta stays below 1.
    """
    scale = DEFAULT_T / T
    return make_linear_schedule(T, DEFAULT_BETA_START * scale, DEFAULT_BETA_END * scale, eta)


def q_sample(schedule: NoiseSchedule, x0, t: int, noise) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(ab) x0 + sqrt(1 - ab) noise``."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise DimensionError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    if not 1 <= t <= schedule.T:
        raise ValidationError(f"step {t} outside [1, {schedule.T}]")
    a = schedule.ab(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


@dataclass(frozen=True)
class StepPlan:
    taus: tuple[int, ...]
    direction: str = DENOISE
    T: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.direction not in (DENOISE, INVERT):
            raise ValidationError(f"unknown direction {self.direction!r}")
        taus = self.taus
        if len(taus) < 2 or taus[0] != 0:
            raise ValidationError("a plan needs at least two steps and must start at 0")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ValidationError("plan steps must be strictly increasing")
        if self.T and taus[-1] > self.T:
            raise ValidationError(f"plan ends at {taus[-1]} beyond T={self.T}")

    @property
    def t_end(self) -> int:
        return self.taus[-1]

    @property
    def n_steps(self) -> int:
        return len(self.taus) - 1

    def transitions(self) -> Iterator[tuple[int, int]]:
        """``(t_from, t_to)`` pairs in run order."""
        if self.direction == INVERT:
            yield from zip(self.taus, self.taus[1:])
        else:
            rev = self.taus[::-1]
            yield from zip(rev, rev[1:])

    def entry(self) -> int:
        return 0 if self.direction == INVERT else self.t_end

    def reversed(self) -> "StepPlan":
        other = INVERT if self.direction == DENOISE else DENOISE
        return StepPlan(self.taus, other, self.T)

    def truncated(self, t_stop: int) -> "StepPlan":
        """Sub-plan over steps ``<= t_stop`` (``t_stop`` must be a plan step)."""
        if t_stop not in self.taus:
            raise ValidationError(f"step {t_stop} is not part of the plan")
        return StepPlan(tuple(t for t in self.taus if t <= t_stop), self.direction, self.T)


def make_step_plan(schedule: NoiseSchedule, n_steps: int, t_end: int | None = None, direction: str = DENOISE) -> StepPlan:
    """Evenly spaced steps ``0 .. t_end`` (``n_steps`` jumps, rounded, deduplicated)."""
    t_end = schedule.T if t_end is None else int(t_end)
    if n_steps < 1:
        raise ValidationError("n_steps must be at least 1")
    if t_end > schedule.T:
        raise ValidationError(f"t_end={t_end} exceeds T={schedule.T}")
    if n_steps > t_end:
        raise ValidationError(f"n_steps={n_steps} exceeds t_end={t_end}")
    taus = np.unique(np.rint(np.linspace(0, t_end, n_steps + 1)).astype(int))
    return StepPlan(tuple(int(t) for t in taus), direction, schedule.T)


def strided_plan(schedule: NoiseSchedule, stride: int, t_end: int | None = None, direction: str = DENOISE) -> StepPlan:
    """Plan visiting every ``stride``-th step down from ``t_end`` (which must be a multiple)."""
    t_end = schedule.T if t_end is None else int(t_end)
    if stride < 1 or t_end % stride:
        raise ValidationError(f"stride {stride} must divide t_end {t_end}")
    return StepPlan(tuple(range(0, t_end + 1, stride)), direction, schedule.T)

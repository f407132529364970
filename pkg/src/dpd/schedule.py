"""Angle schedules for the variance-preserving diffusion process.

Diffusion time is an angle delta in [0, pi/2] with alpha = cos(delta) and
sigma = sin(delta). A schedule is a sequence of positive step sizes
omega_1..omega_T summing to pi/2 together with the anchor angles
delta_1..delta_T the sampler visits (delta_T = pi/2, delta_t - omega_t =
delta_{t-1}, delta_1 - omega_1 = 0).

Schedules are precomputed once per run in 64-bit precision; anchor angles
are built from prefix sums of the step sizes, which avoids the cancellation
that subtracting suffix sums from pi/2 would produce at small angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

HALF_PI = math.pi / 2.0

SCHEDULE_KINDS = ("uniform", "linear")


@dataclass(frozen=True)
class AngleSchedule:
    """Step sizes omega_t and anchor angles delta_t, both in radians."""

    step_count: int
    omegas: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omegas", _readonly(self.omegas))
        object.__setattr__(self, "deltas", _readonly(self.deltas))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).copy()
    a.setflags(write=False)
    return a


def alpha(delta: float) -> float:
    """Signal coefficient cos(delta); alpha**2 + sigma**2 = 1."""
    _check_angle(delta)
    return math.cos(delta)


def sigma(delta: float) -> float:
    """Noise coefficient sin(delta)."""
    _check_angle(delta)
    return math.sin(delta)


def _check_angle(delta: float) -> None:
    if not (0.0 <= delta <= HALF_PI):
        raise DataError(f"angle {delta!r} outside [0, pi/2]")


def uniform_schedule(T: int) -> AngleSchedule:
    """Equal step sizes omega_t = pi / (2T)."""
    _check_steps(T)
    omegas = np.full(T, HALF_PI / T, dtype=np.float64)
    return AngleSchedule(T, omegas, deltas_from_omegas(omegas))


def linear_schedule(T: int) -> AngleSchedule:
    """Linearly increasing steps omega_t = pi/(6T) + 2*pi*t / (3T(T+1)).

    The sum telescopes to pi/6 + pi/3 = pi/2 analytically; the first
    sampling step (t = T) takes the largest stride.
    """
    _check_steps(T)
    t = np.arange(1, T + 1, dtype=np.float64)
    omegas = math.pi / (6.0 * T) + (2.0 * math.pi) * t / (3.0 * T * (T + 1))
    return AngleSchedule(T, omegas, deltas_from_omegas(omegas))


def _check_steps(T: int) -> None:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"step count must be a positive integer, got {T!r}")


def deltas_from_omegas(omegas: np.ndarray) -> np.ndarray:
    """Anchor angles delta_t = sum_{i<=t} omega_i, with delta_T pinned to pi/2."""
    omegas = np.asarray(omegas, dtype=np.float64)
    if omegas.ndim != 1 or omegas.size < 1:
        raise DataError("omegas must be a non-empty 1-D vector")
    if np.any(omegas <= 0.0):
        raise DataError("every omega_t must be strictly positive")
    total = math.fsum(omegas.tolist())
    if abs(total - HALF_PI) > 1e-9:
        raise DataError(f"omegas sum to {total!r}, not pi/2 (|err| > 1e-9)")
    deltas = np.cumsum(omegas)
    deltas[-1] = HALF_PI
    return deltas


def make_schedule(kind: str, T: int) -> AngleSchedule:
    if kind == "uniform":
        return uniform_schedule(T)
    if kind == "linear":
        return linear_schedule(T)
    raise ConfigError(f"unknown schedule kind {kind!r} (expected one of {SCHEDULE_KINDS})")

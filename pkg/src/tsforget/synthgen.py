"""Multi-sinusoid signal generation and the four built-in benchmark datasets.

A signal is a sum of unit-amplitude sines, each with its own period (in
time steps) and a phase restricted to the grid ``2*pi*k/phase_div``.
Phase indices come from numpy's PCG64 bit generator seeded explicitly, so a
``(periods, phase_div, seed)`` triple always yields the same signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .pipeline import TimeSeries

TWO_PI = 2.0 * math.pi

BUILTIN_PERIODS: dict[str, tuple[float, ...]] = {
    "d1": (21, 84, 336, 2688),
    "d2": (42, 168, 1344),
    "d3": (1260, 296, 1114, 1120, 325, 458, 105, 67, 911, 522),
    "d4": (674, 570, 71, 726, 709, 1127, 226, 1198, 1282, 358),
}

DEFAULT_PHASE_DIV = 12
DEFAULT_N_STEPS = 2688
DEFAULT_START = datetime(2000, 1, 1)
DEFAULT_STEP_MINUTES = 30


@dataclass(frozen=True)
class SineComponent:
    period: float
    phase: float

    def __post_init__(self):
        if not (self.period > 0 and math.isfinite(self.period)):
            raise ValueError(f"period must be positive and finite, got {self.period}")


@dataclass(frozen=True)
class SignalSpec:
    components: tuple[SineComponent, ...]
    phase_div: int = DEFAULT_PHASE_DIV
    seed: int = 0
    phase_indices: tuple[int, ...] = field(default=(), compare=True)

    def __post_init__(self):
        if not self.components:
            raise ValueError("a signal needs at least one component")
        if self.phase_div < 1:
            raise ValueError(f"phase_div must be >= 1, got {self.phase_div}")

    @property
    def periods(self) -> list[float]:
        return [c.period for c in self.components]

    @property
    def phases(self) -> list[float]:
        return [c.phase for c in self.components]

    def to_dict(self) -> dict:
        return {
            "periods": self.periods,
            "phases": self.phases,
            "phase_indices": list(self.phase_indices),
            "phase_div": self.phase_div,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class GenerationConfig:
    n_steps: int = DEFAULT_N_STEPS
    start_timestamp: datetime = DEFAULT_START
    step_minutes: int = DEFAULT_STEP_MINUTES

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.step_minutes < 1:
            raise ValueError(f"step_minutes must be >= 1, got {self.step_minutes}")


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def phase_rng(seed: int) -> np.random.Generator:
    """PCG64 generator used for every phase draw in this module."""
    return np.random.Generator(np.random.PCG64(_check_seed(seed)))


def sample_phases(periods, phase_div: int = DEFAULT_PHASE_DIV, seed: int = 0) -> SignalSpec:
    """Attach a grid phase to every period.

    Each phase index ``k`` is an unbiased uniform draw from
    ``{0, ..., phase_div - 1}`` (``Generator.integers`` uses Lemire's
    bounded-integer method, so no modulo bias for any ``phase_div``).
    """
    periods = [float(p) for p in periods]
    if not periods:
        raise ValueError("period list is empty")
    for p in periods:
        if not (p > 0 and math.isfinite(p)):
            raise ValueError(f"periods must be positive, got {p}")
    if int(phase_div) < 1:
        raise ValueError(f"phase_div must be >= 1, got {phase_div}")
    phase_div = int(phase_div)

    rng = phase_rng(seed)
    ks = [int(k) for k in rng.integers(0, phase_div, size=len(periods))]
    comps = tuple(SineComponent(p, TWO_PI * k / phase_div) for p, k in zip(periods, ks))
    return SignalSpec(comps, phase_div=phase_div, seed=int(seed), phase_indices=tuple(ks))


def eval_signal(spec: SignalSpec, x):
    """Sum of ``sin(2*pi*x/period + phase)`` over the components.

    ``x`` is a time-step index (scalar or array). Components are accumulated
    in declaration order.
    """
    x = np.asarray(x, dtype=np.float64)
    total = np.zeros_like(x)
    for c in spec.components:
        total = total + np.sin(TWO_PI * x / c.period + c.phase)
    if total.ndim == 0:
        return float(total)
    return total


def generate_series(spec: SignalSpec, cfg: GenerationConfig | None = None) -> TimeSeries:
    cfg = cfg or GenerationConfig()
    step = timedelta(minutes=cfg.step_minutes)
    try:
        # probe the last timestamp before building the full list
        cfg.start_timestamp + (cfg.n_steps - 1) * step
    except OverflowError as exc:
        raise ValueError(f"timestamps overflow for n_steps={cfg.n_steps}") from exc
    timestamps = [cfg.start_timestamp + i * step for i in range(cfg.n_steps)]
    values = eval_signal(spec, np.arange(cfg.n_steps, dtype=np.float64))
    return TimeSeries(timestamps, np.atleast_1d(values), cfg.step_minutes)


def builtin_spec(name: str, seed: int = 0) -> SignalSpec:
    key = str(name).lower()
    if key not in BUILTIN_PERIODS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {sorted(BUILTIN_PERIODS)}")
    return sample_phases(BUILTIN_PERIODS[key], DEFAULT_PHASE_DIV, seed)


def builtin_series(name: str, seed: int = 0, cfg: GenerationConfig | None = None) -> TimeSeries:
    return generate_series(builtin_spec(name, seed), cfg)


def random_spec(rng: np.random.Generator, min_period: int = 20, max_period: int = 1400,
                min_components: int = 3, max_components: int = 10,
                phase_div: int = DEFAULT_PHASE_DIV) -> SignalSpec:
    """Draw a random signal with integer periods, for the generalist pretraining pool."""
    n = int(rng.integers(min_components, max_components + 1))
    periods = rng.integers(min_period, max_period + 1, size=n)
    phase_seed = int(rng.integers(0, 2**63))
    return sample_phases(periods.tolist(), phase_div, phase_seed)

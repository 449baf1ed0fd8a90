"""Timestep-scheduled hierarchical prompts.

Early (high-t) denoising steps see only the high-level concept tokens; as t
decreases, low-level attribute tokens join one interval at a time until the
full prompt is active. The interval length is a fraction S of the chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PromptHierarchy:
    """High-level concept tokens plus ordered low-level attribute tokens."""

    high: tuple[str, ...]
    low: tuple[str, ...]
    interval_fraction: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "high", tuple(self.high))
        object.__setattr__(self, "low", tuple(self.low))
        if not (0.0 < self.interval_fraction <= 1.0):
            raise ValueError(f"interval_fraction {self.interval_fraction} not in (0, 1]")
        if len(self.low) * self.interval_fraction > 1.0 + 1e-9:
            raise ValueError(
                f"{len(self.low)} levels at interval fraction "
                f"{self.interval_fraction} do not fit the chain"
            )
        cats = [t.split(":")[0] for t in self.low]
        if len(set(cats)) != len(cats):
            raise ValueError(f"duplicate low-level attribute categories in {self.low}")

    @classmethod
    def from_dict(cls, d: dict) -> "PromptHierarchy":
        return cls(
            high=tuple(d["high"]),
            low=tuple(d["low"]),
            interval_fraction=float(d.get("interval_fraction", 0.15)),
        )

    def to_dict(self) -> dict:
        return {
            "high": list(self.high),
            "low": list(self.low),
            "interval_fraction": self.interval_fraction,
        }


@dataclass(frozen=True)
class LevelAssignment:
    t: int
    level: int
    active_tokens: tuple[str, ...]


def interval_steps(T: int, s_fraction: float) -> int:
    return max(1, math.ceil(s_fraction * T))


def level_for(t: int, T: int, hierarchy: PromptHierarchy, *,
              non_hiera: bool = False) -> LevelAssignment:
    """Active prompt level at timestep t: min(len(low), floor((T-t)/ceil(S*T))).

    With `non_hiera` the schedule is disabled and every step carries
    the full prompt.
    """
    if not (1 <= t <= T):
        raise ValueError(f"timestep {t} out of range [1, {T}]")
    n = len(hierarchy.low)
    if non_hiera:
        level = n
    else:
        step = interval_steps(T, hierarchy.interval_fraction)
        level = min(n, (T - t) // step)
    return LevelAssignment(
        t=t,
        level=level,
        active_tokens=hierarchy.high + hierarchy.low[:level],
    )


def sample_training_timestep(rng: np.random.Generator, T: int, *,
                             hierarchy: PromptHierarchy | None = None,
                             stratified: bool = False) -> int:
    """Uniform draw over [1, T]; optionally stratified by prompt level.

    Stratified mode first picks a level uniformly, then a step inside that
    level's interval — useful when late intervals would otherwise be
    under-trained on short chains.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not stratified:
        return int(rng.integers(1, T + 1))
    if hierarchy is None:
        raise ValueError("stratified sampling needs the hierarchy")
    n = len(hierarchy.low)
    step = interval_steps(T, hierarchy.interval_fraction)
    # level k occupies t in (T - (k+1)*step, T - k*step], clamped at level n
    k = int(rng.integers(0, n + 1))
    hi = T - k * step
    lo = 1 if k == n else max(1, T - (k + 1) * step + 1)
    if hi < lo:
        return int(rng.integers(1, T + 1))
    return int(rng.integers(lo, hi + 1))

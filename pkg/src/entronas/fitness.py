"""Scalar fitness from per-stage statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .entropy import StageStats

FAILED = -math.inf


@dataclass(frozen=True)
class FitnessWeights:
    a: tuple

    def __post_init__(self):
        a = tuple(float(x) for x in self.a)
        if len(a) != 6:
            raise ValueError(f"need six weights, got {len(a)}")
        if any(x < 0 or not math.isfinite(x) for x in a):
            raise ValueError(f"weights must be finite and non-negative: {a}")
        if not any(x > 0 for x in a):
            raise ValueError("at least one weight must be positive")
        object.__setattr__(self, "a", a)

    @classmethod
    def parse(cls, text: str) -> "FitnessWeights":
        """Preset name (``A1``/``A2``) or six comma-separated numbers."""
        preset = PRESETS.get(text.strip().upper())
        if preset is not None:
            return preset
        try:
            return cls(tuple(float(x) for x in text.split(",")))
        except ValueError as exc:
            raise ValueError(f"bad weights {text!r}: {exc}") from None

    def label(self) -> str:
        for name, w in PRESETS.items():
            if w == self:
                return name
        return ",".join(f"{x:g}" for x in self.a)


PRESETS = {
    "A1": FitnessWeights((0, 0, 1, 1, 2, 4)),
    "A2": FitnessWeights((0, 0, 1, 1, 3, 6)),
}
A1 = PRESETS["A1"]
A2 = PRESETS["A2"]


@dataclass(frozen=True)
class FitnessValue:
    value: float
    per_stage_z: tuple


def stage_score(stats: StageStats) -> float:
    """``ln var + ln C_in``: entropy plus a width prior for one stage."""
    return stats.log_effective_variance + math.log(stats.in_channels)


def combine(per_stage_z: Sequence[float], weights: FitnessWeights) -> float:
    # weight-zero stages must not leak inf/nan into the sum
    return math.fsum(a * z for a, z in zip(weights.a, per_stage_z) if a) / 6.0


def fitness(stats: Sequence[StageStats], weights: FitnessWeights) -> FitnessValue:
    """Weighted multi-scale fitness, ``(1/6) * sum(a_i * Z'_i)``."""
    if len(stats) != 6 or [s.stage_index for s in stats] != [1, 2, 3, 4, 5, 6]:
        raise ValueError("expected stage stats for C1..C6 in order")
    z = tuple(stage_score(s) for s in stats)
    return FitnessValue(combine(z, weights), z)


def failed_fitness() -> FitnessValue:
    return FitnessValue(FAILED, (math.nan,) * 6)

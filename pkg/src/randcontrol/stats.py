"""Monte-Carlo summaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Estimate:
    """Sample mean with its standard error."""

    value: float
    se: float
    n: int

    def __iter__(self):
        return iter((self.value, self.se))

    def within(self, target, k=3.0, extra=0.0):
        return abs(self.value - target) <= k * self.se + extra

    def __format__(self, spec):
        spec = spec or ".4f"
        return f"{self.value:{spec}} ± {self.se:{spec}}"


def estimate(samples):
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot estimate from an empty sample")
    if np.all(x == x[0]):
        return Estimate(float(x[0]), 0.0, int(x.size))  # zero-variance sample, reported exactly
    # np.sum uses pairwise summation in a fixed order: reproducible reductions
    mean = float(np.sum(x) / x.size)
    if x.size > 1:
        se = float(np.sqrt(np.sum((x - mean) ** 2) / (x.size - 1) / x.size))
    else:
        se = 0.0
    return Estimate(mean, se, int(x.size))


def combined_se(*ests):
    return float(np.sqrt(sum(e.se**2 for e in ests)))


@dataclass
class ValueReport:
    """Value estimates gathered for one benchmark instance."""

    J: Estimate | None = None
    JR: Estimate | None = None
    v0: Estimate | None = None
    v0R: Estimate | None = None
    Y0: Estimate | None = None
    diagnostics: dict = field(default_factory=dict)

"""Sample-complexity bound for recovering the top-k most important layers.

With ``N`` calibration prompts and per-prompt statistics that are sub-Gaussian
with parameter ``sigma``, the empirical top-k set differs from the population
top-k set with probability at most::

    min(1, 2 k (L - k) exp(-N delta^2 / (8 sigma^2)))

where ``delta`` is the score gap between the k-th and (k+1)-th layers. There
are at most ``k (L - k)`` straddling pairs; each is misordered with
probability at most ``2 exp(-N delta^2 / (8 sigma^2))`` (Hoeffding on the
difference of two means).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BoundError(ValueError):
    pass


@dataclass(frozen=True)
class RecoveryParams:
    layers: int
    k: int
    delta: float
    sigma: float
    prompts: int = 0

    def __post_init__(self):
        if not 1 <= self.k < self.layers:
            raise BoundError(f"need 1 <= k < layers, got k={self.k}, layers={self.layers}")
        if not (math.isfinite(self.delta) and self.delta > 0):
            raise BoundError(f"gap must be positive, got {self.delta}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise BoundError(f"sigma must be positive, got {self.sigma}")
        if self.prompts < 0:
            raise BoundError(f"prompt count must be >= 0, got {self.prompts}")

    @property
    def pairs(self) -> int:
        return self.k * (self.layers - self.k)

    @property
    def exponent(self) -> float:
        return self.prompts * self.delta**2 / (8 * self.sigma**2)


def failure_bound(p: RecoveryParams) -> float:
    raw = 2 * p.pairs * math.exp(-p.exponent)
    return min(1.0, raw)


def min_prompts(layers: int, k: int, delta: float, sigma: float, target: float) -> int:
    """Smallest N whose failure bound is at most ``target``."""
    if not 0 < target < 1:
        raise BoundError(f"target probability must be in (0, 1), got {target}")
    p = RecoveryParams(layers, k, delta, sigma, 0)
    n = max(0, math.ceil(8 * sigma**2 / delta**2 * math.log(2 * p.pairs / target)))
    # guard the closed form against floating-point error at the ceiling
    bound = lambda m: failure_bound(RecoveryParams(layers, k, delta, sigma, m))  # noqa: E731
    while n > 0 and bound(n - 1) <= target:
        n -= 1
    while bound(n) > target:
        n += 1
    return n


def estimate_sigma(per_prompt: np.ndarray) -> float:
    """Conservative spread estimate from a (prompts, layers) statistics array.

    Takes the sample standard deviation (ddof=1) of each layer's per-prompt
    statistic and returns the largest one.
    """
    a = np.asarray(per_prompt, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise BoundError(f"need a (prompts >= 2, layers) array, got shape {a.shape}")
    return float(np.max(np.std(a, axis=0, ddof=1)))


def estimate_gap(scores, k: int) -> float:
    """Gap between the k-th and (k+1)-th largest scores."""
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    if not 1 <= k < s.size:
        raise BoundError(f"need 1 <= k < {s.size}, got {k}")
    return float(s[k - 1] - s[k])

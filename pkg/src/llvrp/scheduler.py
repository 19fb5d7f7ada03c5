"""Dynamic context scheduling: per-context hardness from validation gaps
and the temperature-weighted replay distribution over contexts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricStats:
    """Per-context validation gaps: current (g) and previous-epoch (g_hat).

    On a context's first evaluation the previous-epoch gap equals the
    current one, so the difference term starts at zero.
    """

    g: np.ndarray
    g_hat: np.ndarray

    @classmethod
    def first(cls, gaps) -> "MetricStats":
        g = np.asarray(gaps, dtype=np.float64)
        return cls(g=g.copy(), g_hat=g.copy())

    def advance(self, gaps) -> "MetricStats":
        g = np.asarray(gaps, dtype=np.float64)
        if g.shape != self.g.shape:
            raise ValueError(f"gap vector changed length: {g.shape} vs {self.g.shape}")
        return MetricStats(g=g.copy(), g_hat=self.g.copy())


@dataclass(frozen=True)
class DCSConfig:
    eta: float = 0.1
    val_instances: int = 256

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"temperature eta must be positive, got {self.eta}")
        if self.val_instances < 1:
            raise ValueError("need at least one validation instance per context")


def hardness(costs_model, costs_oracle) -> float:
    """Mean relative excess of model costs over oracle costs."""
    model = np.asarray(costs_model, dtype=np.float64)
    oracle = np.asarray(costs_oracle, dtype=np.float64)
    if model.shape != oracle.shape:
        raise ValueError(f"cost vectors differ in length: {model.shape} vs {oracle.shape}")
    if (oracle <= 0).any():
        raise ValueError("oracle costs must be positive (degenerate instance)")
    return float(np.mean((model - oracle) / oracle))


def metric_probs(stats: MetricStats, eta: float) -> np.ndarray:
    """Replay distribution over contexts.

    Numerator per context i: exp(g_i / eta) + exp(g_i - g_hat_i); the
    first term favors currently hard contexts, the second favors
    contexts whose gap just regressed.
    """
    if eta <= 0:
        raise ValueError(f"temperature eta must be positive, got {eta}")
    weights = np.exp(stats.g / eta) + np.exp(stats.g - stats.g_hat)
    return weights / weights.sum()


def sample_plan(probs, total: int, seed: int) -> np.ndarray:
    """Multinomial split of `total` instances across contexts."""
    probs = np.asarray(probs, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return rng.multinomial(total, probs / probs.sum())

"""Estimated importance ratios, the three clipping regimes, and log-space clip-then-softmax."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

CLIP_SPACES = ("linear", "log_symmetric", "log_upper")


class ClipConfigurationError(ValueError):
    pass


def clip_bounds(epsilon: float, clip_space: str = "log_symmetric") -> tuple[float, float]:
    """Clip interval for the log-ratio.

    ``linear`` is [log(1-eps), log(1+eps)] and needs eps < 1; ``log_symmetric``
    is [-eps, eps] nats; ``log_upper`` only caps from above at eps nats.
    """
    if epsilon <= 0:
        raise ClipConfigurationError("epsilon must be positive")
    if clip_space == "linear":
        if epsilon >= 1:
            raise ClipConfigurationError(
                f"linear clipping needs epsilon < 1 (got {epsilon}); use clip_space='log_symmetric'")
        return math.log1p(-epsilon), math.log1p(epsilon)
    if clip_space == "log_symmetric":
        return -float(epsilon), float(epsilon)
    if clip_space == "log_upper":
        return -math.inf, float(epsilon)
    raise ClipConfigurationError(f"unknown clip_space {clip_space!r}")


def upper_weight(epsilon: float, clip_space: str = "log_symmetric") -> float:
    """Largest clipped weight, the (1 + eps) of the saturation bound."""
    if clip_space == "linear":
        return 1.0 + epsilon
    return math.exp(clip_bounds(epsilon, clip_space)[1])


@dataclass
class LogRatioSet:
    log_ratios: np.ndarray
    epsilon: float = 5.0
    clip_space: str = "log_symmetric"

    def __post_init__(self):
        self.log_ratios = np.asarray(self.log_ratios, dtype=np.float64)
        if self.log_ratios.ndim != 1 or len(self.log_ratios) < 2:
            raise ValueError("a group needs at least two log-ratios")
        if not np.isfinite(self.log_ratios).all():
            raise ValueError("log-ratios must be finite")

    @property
    def group_size(self) -> int:
        return len(self.log_ratios)

    @classmethod
    def from_elbos(cls, elbo_new, elbo_old, epsilon=5.0, clip_space="log_symmetric"):
        return cls(np.asarray(elbo_new, dtype=np.float64) - np.asarray(elbo_old, dtype=np.float64),
                   epsilon, clip_space)


@dataclass
class ClippedWeightSet:
    weights: np.ndarray
    alphas: np.ndarray
    clipped_log: np.ndarray
    mode: str = "stabledrl"


def effective_log_multipliers(log_ratios, advantages, epsilon, clip_space="linear"):
    """Log of the GRPO effective multiplier, element-wise.

    Positive advantage: min(rho, upper).  Negative advantage: max(rho, lower),
    so the negative branch is never capped from above.
    """
    lo, hi = clip_bounds(epsilon, clip_space)
    log_ratios = np.asarray(log_ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    return np.where(advantages >= 0, np.minimum(log_ratios, hi), np.maximum(log_ratios, lo))


def effective_multiplier_grpo(rho: float, advantage: float, epsilon: float, clip_space: str = "linear") -> float:
    if rho <= 0:
        raise ValueError("ratio must be positive")
    lo, hi = clip_bounds(epsilon, clip_space)
    if clip_space == "linear":
        return min(rho, 1.0 + epsilon) if advantage >= 0 else max(rho, 1.0 - epsilon)
    return min(rho, math.exp(hi)) if advantage >= 0 else max(rho, math.exp(lo))


def clip_unconditional(rho: float, epsilon: float, clip_space: str = "linear") -> float:
    if rho <= 0:
        raise ValueError("ratio must be positive")
    lo, hi = clip_bounds(epsilon, clip_space)
    if clip_space == "linear":
        return min(max(rho, 1.0 - epsilon), 1.0 + epsilon)
    return math.exp(min(max(math.log(rho), lo), hi))


def clip_log_ratios(log_ratios, epsilon, clip_space="log_symmetric") -> np.ndarray:
    lo, hi = clip_bounds(epsilon, clip_space)
    return np.clip(np.asarray(log_ratios, dtype=np.float64), lo, hi)


def clip_then_softmax(logs: LogRatioSet) -> ClippedWeightSet:
    clipped = clip_log_ratios(logs.log_ratios, logs.epsilon, logs.clip_space)
    alphas = np.exp(clipped - logsumexp(clipped))
    return ClippedWeightSet(np.exp(clipped), alphas, clipped, "stabledrl")


@dataclass
class RatioStatistics:
    ratios: np.ndarray
    log_ratios: np.ndarray
    mean: float
    variance: float
    log_quantiles: dict[float, float]


def decompose_ratio_statistics(drift: float, noise_samples) -> RatioStatistics:
    """Ratios exp(drift + noise) for each noise draw, with summary moments."""
    logs = drift + np.asarray(noise_samples, dtype=np.float64)
    ratios = np.exp(logs)
    qs = (0.01, 0.1, 0.5, 0.9, 0.99)
    return RatioStatistics(
        ratios=ratios,
        log_ratios=logs,
        mean=float(ratios.mean()),
        variance=float(ratios.var()),
        log_quantiles={q: float(v) for q, v in zip(qs, np.quantile(logs, qs))},
    )

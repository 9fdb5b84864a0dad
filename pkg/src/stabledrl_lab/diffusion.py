"""Forward masking process and Monte-Carlo ELBO estimators.

A single-pattern estimate is ``w(t) * sum_{masked i} log p(x_i | x_t)`` with
``w(t) = 1/t``.  ``estimate_elbo`` averages ``m`` such patterns; pattern ``k``
always draws from the RNG stream ``(seed, k)`` so estimates can be split and
recombined exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Tensor
from .model import DenoiserParams, TokenSequence, bind_params, forward_logprobs, full_mask, token_log_probs
from .rng import as_rng, derive_rng
from .staircase import staircase_block_logprobs, staircase_forward

POLICIES = ("uniform", "blockwise", "head_biased", "tail_biased")
DEFAULT_T_FLOOR = 0.15


@dataclass
class MaskPattern:
    t: float
    masked: np.ndarray  # bool over the response region
    policy: str = "uniform"
    mc_weight: float = 1.0

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


@dataclass
class CorruptedSequence:
    tokens: np.ndarray
    prompt_len: int
    pattern: MaskPattern

    def masked_positions(self) -> np.ndarray:
        return self.prompt_len + np.flatnonzero(self.pattern.masked)


@dataclass
class ElboEstimate:
    value: float
    num_samples: int
    per_sample_values: np.ndarray
    patterns: list[MaskPattern] = field(default_factory=list)


def _uniform_at_least_one(rng, length, t):
    """Independent Bernoulli(t) masks conditioned on at least one success.

    Samples the first masked index from its conditional law, then the rest
    freely; this is the exact distribution rejection resampling converges to,
    without the unbounded loop as t -> 0.
    """
    if t >= 1.0:
        return np.ones(length, dtype=bool)
    q = 1.0 - t
    # P(first = k | >=1) proportional to t q^k, k < length
    log_w = np.arange(length) * math.log(q) if q > 0 else np.where(np.arange(length) == 0, 0.0, -np.inf)
    w = np.exp(log_w - log_w.max())
    first = int(rng.choice(length, p=w / w.sum()))
    masked = np.zeros(length, dtype=bool)
    masked[first] = True
    tail = rng.random(length - first - 1) < t
    masked[first + 1:] = tail
    return masked


def _biased_positions(rng, length, count, beta, sign):
    k = np.arange(length)
    w = np.exp(sign * beta * k / length)
    return rng.choice(length, size=count, replace=False, p=w / w.sum())


def sample_pattern(rng, response_len: int, t: float, policy: str = "uniform", block_size: int | None = None,
                   beta: float = 6.0, count: int | None = None) -> MaskPattern:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"noise level t={t} outside (0, 1]")
    if response_len < 1:
        raise ValueError("empty response region")
    if policy == "uniform":
        masked = _uniform_at_least_one(rng, response_len, t)
    elif policy == "blockwise":
        bs = block_size or response_len
        if response_len % bs:
            raise ValueError("block_size must divide the response length")
        nblocks = response_len // bs
        k = max(1, math.ceil(t * nblocks - 1e-12))
        masked = np.zeros(response_len, dtype=bool)
        masked[(nblocks - k) * bs:] = True
        t = k / nblocks  # weight by the fraction actually masked
    elif policy in ("head_biased", "tail_biased"):
        if count is None:
            count = max(1, round(t * response_len))
        count = min(max(int(count), 1), response_len)
        sign = -1.0 if policy == "head_biased" else 1.0
        masked = np.zeros(response_len, dtype=bool)
        masked[_biased_positions(rng, response_len, count, beta, sign)] = True
        t = count / response_len
    else:
        raise ValueError(f"unknown masking policy {policy!r}")
    return MaskPattern(t=float(t), masked=masked, policy=policy, mc_weight=1.0 / t)


def apply_pattern(clean: TokenSequence, pattern: MaskPattern, mask_id: int) -> CorruptedSequence:
    tokens = clean.tokens.copy()
    tokens[clean.prompt_len:][pattern.masked] = mask_id
    return CorruptedSequence(tokens, clean.prompt_len, pattern)


def corrupt(clean: TokenSequence, t: float, policy: str = "uniform", seed=0, *, mask_id: int,
            block_size: int | None = None, beta: float = 6.0, count: int | None = None):
    """Mask response tokens of ``clean``; returns (CorruptedSequence, MaskPattern)."""
    rng = as_rng(seed)
    pattern = sample_pattern(rng, len(clean) - clean.prompt_len, t, policy, block_size, beta, count)
    return apply_pattern(clean, pattern, mask_id), pattern


def draw_patterns(x: TokenSequence, m: int, policy: str, seed, *, block_size=None, t_floor=DEFAULT_T_FLOOR,
                  offset: int = 0, beta: float = 6.0, count: int | None = None) -> list[MaskPattern]:
    """Patterns ``offset .. offset+m-1`` of the stream ``seed``; t ~ U[t_floor, 1]."""
    if m < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    out = []
    length = len(x) - x.prompt_len
    for k in range(offset, offset + m):
        rng = derive_rng(seed, "pattern", k)
        if count is not None:
            t = count / length
        else:
            t = 1.0 - rng.random() * (1.0 - t_floor)  # in (t_floor, 1]
        out.append(sample_pattern(rng, length, t, policy, block_size, beta, count))
    return out


def _check_clean(params: DenoiserParams, x: TokenSequence):
    if (x.tokens == params.mask_id).any():
        raise ValueError("sequence to score contains mask tokens")
    if x.prompt_len >= len(x):
        raise ValueError("sequence has no response region")


def pattern_value(params: DenoiserParams, x: TokenSequence, pattern: MaskPattern, arch: str = "full") -> float:
    corrupted = apply_pattern(x, pattern, params.mask_id)
    if arch == "full":
        logp = token_log_probs(params, corrupted.tokens, "full")
    elif arch == "block":
        logp = staircase_block_logprobs(params, x, corrupted)
    else:
        raise ValueError(f"unknown arch {arch!r}")
    pos = corrupted.masked_positions()
    return pattern.mc_weight * float(logp[pos, x.tokens[pos]].sum())


def evaluate_patterns(params: DenoiserParams, x: TokenSequence, patterns, arch: str = "full") -> ElboEstimate:
    _check_clean(params, x)
    vals = np.array([pattern_value(params, x, p, arch) for p in patterns])
    return ElboEstimate(float(vals.mean()), len(vals), vals, list(patterns))


def estimate_elbo(params: DenoiserParams, x: TokenSequence, m: int = 2, policy: str = "uniform", seed=0,
                  arch: str = "full", *, t_floor=DEFAULT_T_FLOOR, offset: int = 0) -> ElboEstimate:
    _check_clean(params, x)
    patterns = draw_patterns(x, m, policy, seed, block_size=params.block_size, t_floor=t_floor, offset=offset)
    return evaluate_patterns(params, x, patterns, arch)


def estimate_elbo_pairwise(params_new: DenoiserParams, params_old: DenoiserParams, x: TokenSequence, m: int = 2,
                           policy: str = "uniform", seed=0, coupling: str = "independent", arch: str = "full",
                           *, t_floor=DEFAULT_T_FLOOR):
    """ELBO under both policies; ``shared_masks`` reuses one pattern set for both."""
    if coupling == "shared_masks":
        new = estimate_elbo(params_new, x, m, policy, seed, arch, t_floor=t_floor)
        old = evaluate_patterns(params_old, x, new.patterns, arch)
    elif coupling == "independent":
        new = estimate_elbo(params_new, x, m, policy, derive_rng(seed, "new").integers(2**63), arch, t_floor=t_floor)
        old = estimate_elbo(params_old, x, m, policy, derive_rng(seed, "old").integers(2**63), arch, t_floor=t_floor)
    else:
        raise ValueError(f"unknown coupling {coupling!r}")
    return new, old


def elbo_surrogate(tape: Tape, params: DenoiserParams, x: TokenSequence, patterns, arch: str = "full") -> Tensor:
    """Recorded scalar mean_k w_k * sum_masked log p; differentiate with ``backward``."""
    _check_clean(params, x)
    n = len(x)
    p = bind_params(tape, params)
    logps = []
    for pat in patterns:
        corrupted = apply_pattern(x, pat, params.mask_id)
        pos = corrupted.masked_positions()
        if arch == "full":
            logp = forward_logprobs(tape, p, corrupted.tokens, np.arange(n), full_mask(n))
            offset = 0
        elif arch == "block":
            _, _, logp = staircase_forward(tape, params, x, corrupted, bound=p)
            offset = n
        else:
            raise ValueError(f"unknown arch {arch!r}")
        logps.append(tape.gather(logp, pos + offset, x.tokens[pos],
                                 np.full(len(pos), pat.mc_weight / len(patterns))))
    total = logps[0]
    for part in logps[1:]:
        total = tape.add(total, part)
    return total

"""Group-update estimators (pg, grpo, uc_grpo, stabledrl), advantages, and the optimizer."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, backward
from .diffusion import draw_patterns, elbo_surrogate, evaluate_patterns
from .model import PARAM_ORDER, DenoiserParams, TokenSequence
from .ratios import (LogRatioSet, clip_log_ratios, clip_then_softmax, effective_log_multipliers)
from .rng import derive_rng

log = logging.getLogger(__name__)

ESTIMATORS = ("pg", "grpo", "uc_grpo", "stabledrl")
STD_FLOOR = 1e-8


def compute_advantages(rewards, mode: str = "standardized") -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need a group of at least two rewards")
    centered = r - r.mean()
    if mode == "raw_centered":
        return centered
    if mode == "standardized":
        return centered / max(r.std(), STD_FLOOR)
    raise ValueError(f"unknown advantage mode {mode!r}")


@dataclass
class RolloutGroup:
    advantages: np.ndarray
    elbo_new: np.ndarray
    elbo_old: np.ndarray
    rollouts: list[TokenSequence] = field(default_factory=list)
    rewards: np.ndarray | None = None
    prompt: TokenSequence | None = None
    inner_step: int = 0

    def __post_init__(self):
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        self.elbo_new = np.asarray(self.elbo_new, dtype=np.float64)
        self.elbo_old = np.asarray(self.elbo_old, dtype=np.float64)
        if len(self.advantages) < 2:
            raise ValueError("a rollout group needs G >= 2")

    @property
    def size(self) -> int:
        return len(self.advantages)

    @property
    def log_ratios(self) -> np.ndarray:
        return self.elbo_new - self.elbo_old

    @classmethod
    def from_log_ratios(cls, advantages, log_ratios):
        log_ratios = np.asarray(log_ratios, dtype=np.float64)
        return cls(advantages, log_ratios, np.zeros_like(log_ratios))


@dataclass
class UpdateVector:
    direction: np.ndarray
    norm: float
    estimator: str
    per_sample_norms: np.ndarray  # ||A_j g_j||
    effective_weights: np.ndarray  # coefficient on each A_j g_j


def estimator_coefficients(advantages, log_ratios, estimator, epsilon=5.0, clip_space="log_symmetric"):
    """Coefficient c_j so that update = sum_j c_j A_j g_j."""
    G = len(advantages)
    if estimator == "pg":
        return np.full(G, 1.0 / G)
    if estimator == "grpo":
        with np.errstate(over="ignore"):
            return np.exp(effective_log_multipliers(log_ratios, advantages, epsilon, clip_space)) / G
    if estimator == "uc_grpo":
        return np.exp(clip_log_ratios(log_ratios, epsilon, clip_space)) / G
    if estimator == "stabledrl":
        return clip_then_softmax(LogRatioSet(log_ratios, epsilon, clip_space)).alphas
    raise ValueError(f"unknown estimator {estimator!r}")


def group_update(group: RolloutGroup, per_sample_gradients, estimator: str = "stabledrl",
                 epsilon: float = 5.0, clip_space: str = "log_symmetric") -> UpdateVector:
    """Combine per-sample score gradients g_j into one ascent direction.

    pg: mean A_j g_j.  grpo: mean m_j A_j g_j with the conditional multiplier.
    uc_grpo: mean w_j A_j g_j with unconditionally clipped w.  stabledrl:
    sum alpha_j A_j g_j with alpha the self-normalised clipped weights.  The
    weights are plain numbers here, so no gradient flows through them.
    """
    grads = np.asarray(per_sample_gradients, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] != group.size:
        raise ValueError(f"expected {group.size} per-sample gradients, got shape {grads.shape}")
    log_ratios = group.log_ratios
    if estimator != "pg" and not np.isfinite(log_ratios).all():
        direction = np.full(grads.shape[1], np.nan)
        coeffs = np.full(group.size, np.nan)
    else:
        coeffs = estimator_coefficients(group.advantages, log_ratios, estimator, epsilon, clip_space)
        with np.errstate(over="ignore", invalid="ignore"):
            direction = (coeffs * group.advantages) @ grads
    scaled = group.advantages[:, None] * grads
    return UpdateVector(direction, float(np.linalg.norm(direction)), estimator,
                        np.linalg.norm(scaled, axis=1), coeffs)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    lr_schedule: str = "constant"
    total_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    rejected_total: int = 0
    consecutive_rejections: int = 0
    last_rejected: bool = False
    rejections: list[dict] = field(default_factory=list)

    def current_lr(self) -> float:
        if self.lr_schedule == "linear" and self.total_steps > 0:
            return self.lr * max(0.0, 1.0 - self.step / self.total_steps)
        return self.lr


def apply_update(params: DenoiserParams, state: OptimizerState, update, maximize: bool = False):
    """One optimizer step on the flattened parameters.

    The update is treated as a loss gradient (params move along ``-update``)
    unless ``maximize`` is set.  Non-finite updates are rejected: parameters
    stay put and the rejection is recorded on the returned state.
    """
    vec = np.asarray(getattr(update, "direction", update), dtype=np.float64)
    theta = params.to_vector()
    if vec.shape != theta.shape:
        raise ValueError(f"update shape {vec.shape} does not match parameters {theta.shape}")
    state = replace(state, rejections=list(state.rejections))
    if not np.isfinite(vec).all():
        state.rejected_total += 1
        state.consecutive_rejections += 1
        state.last_rejected = True
        state.rejections.append({"step": state.step, "reason": "non-finite update"})
        log.info("rejected non-finite update at optimizer step %d", state.step)
        return params, state
    grad = -vec if maximize else vec
    if state.grad_clip > 0:
        norm = np.linalg.norm(grad)
        if norm > state.grad_clip:
            grad = grad * (state.grad_clip / norm)
    lr = state.current_lr()
    if state.kind == "sgd":
        new_theta = theta - lr * grad
    elif state.kind == "adamw":
        m = np.zeros_like(theta) if state.m is None else state.m
        v = np.zeros_like(theta) if state.v is None else state.v
        t = state.step + 1
        m = state.beta1 * m + (1 - state.beta1) * grad
        v = state.beta2 * v + (1 - state.beta2) * grad * grad
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_theta = theta - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta)
        state.m, state.v = m, v
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")
    state.step += 1
    state.consecutive_rejections = 0
    state.last_rejected = False
    return params.from_vector(new_theta), state


# ---------------------------------------------------------------- per-sample gradients

def elbo_gradient(params: DenoiserParams, x: TokenSequence, patterns, arch: str = "full") -> np.ndarray:
    """Flattened gradient of the ELBO surrogate for one sequence."""
    tape = Tape()
    elbo_surrogate(tape, params, x, patterns, arch)
    grads = backward(tape)
    return np.concatenate([grads[k].ravel() for k in PARAM_ORDER])


def per_sample_gradients(params: DenoiserParams, rollouts, m: int, policy: str, seed, arch: str = "full",
                         t_floor: float = 0.15) -> np.ndarray:
    rows = []
    for j, x in enumerate(rollouts):
        patterns = draw_patterns(x, m, policy, derive_rng(seed, "grad", j).integers(2**63),
                                 block_size=params.block_size, t_floor=t_floor)
        rows.append(elbo_gradient(params, x, patterns, arch))
    return np.stack(rows)


def numerator_elbos(params: DenoiserParams, rollouts, m, policy, seed, arch="full", t_floor=0.15,
                    shared_patterns=None, stress=None, stressed=()):
    """ELBO of each rollout under ``params`` (the ratio numerator) on fresh or shared patterns."""
    from .diagnostics import stress_patterns

    out = np.empty(len(rollouts))
    for j, x in enumerate(rollouts):
        if shared_patterns is not None:
            pats = shared_patterns[j]
        elif stress is not None and j in stressed:
            pats = stress_patterns(x, m, stress, derive_rng(seed, "new", j).integers(2**63),
                                   params.block_size, side="numerator")
        else:
            pats = draw_patterns(x, m, policy, derive_rng(seed, "new", j).integers(2**63),
                                 block_size=params.block_size, t_floor=t_floor)
        out[j] = evaluate_patterns(params, x, pats, arch).value
    return out


def inner_update_loop(group: RolloutGroup, params: DenoiserParams, num_inner: int, estimator: str, config,
                      state: OptimizerState | None = None, seed=0, params_old: DenoiserParams | None = None,
                      norm_history: list | None = None, old_patterns=None, stressed=(), log_ratio_noise=None):
    """Run ``num_inner`` updates on one fixed rollout group.

    Every step re-estimates the numerator ELBOs under the current iterate and
    compares them with the frozen ``group.elbo_old``.  ``log_ratio_noise``,
    if given, is called as ``f(rng, G)`` and its output is added to the
    log-ratios (synthetic noise injection).  D_i/S_i are measured after each
    update.  Returns a DriftTrace; ``trace.params`` and
    ``trace.optimizer_state`` hold the final iterate.
    """
    from .diagnostics import DriftStep, DriftTrace, measure_drift_state, spike_indicator

    if num_inner < 1:
        raise ValueError("num_inner must be >= 1")
    cfg = config
    state = state or OptimizerState()
    history = norm_history if norm_history is not None else []
    params_old = params_old or params
    stress = cfg.stress_config() if cfg.condition == "exploding" else None
    shared = old_patterns if cfg.coupling == "shared_masks" else None
    stressed = set(int(j) for j in stressed)
    trace = DriftTrace(a0=cfg.a0)
    for i in range(num_inner):
        group.elbo_new = numerator_elbos(params, group.rollouts, cfg.mc_samples, cfg.mask_policy,
                                         derive_rng(seed, "ratio", i).integers(2**63), cfg.arch, cfg.t_floor,
                                         shared, stress, stressed)
        if log_ratio_noise is not None:
            group.elbo_new = group.elbo_new + log_ratio_noise(derive_rng(seed, "noise", i), group.size)
        group.inner_step = i
        grads = per_sample_gradients(params, group.rollouts, cfg.grad_mc_samples, cfg.grad_mask_policy,
                                     derive_rng(seed, "grads", i).integers(2**63), cfg.arch, cfg.t_floor)
        update = group_update(group, grads, estimator, cfg.epsilon, cfg.clip_space)
        spike = spike_indicator(history, update.norm, cfg.spike_window, cfg.spike_delta)
        params, state = apply_update(params, state, update, maximize=True)
        if not state.last_rejected:
            history.append(update.norm)
        drift = spread = None
        if cfg.drift_m > 0:
            res = measure_drift_state(group, params, params_old, cfg.a0, m=cfg.drift_m,
                                      seed=derive_rng(seed, "drift", i).integers(2**63), arch=cfg.arch)
            if res is not None:
                drift, spread = res
        coeff_sum = np.nansum(update.effective_weights)
        trace.steps.append(DriftStep(
            inner_step=i,
            drift=drift,
            spread=spread,
            update_norm=update.norm,
            log_ratios=group.log_ratios.copy(),
            spike=spike.spike,
            spike_threshold=spike.threshold,
            alpha_max=float(np.nanmax(update.effective_weights) / coeff_sum) if coeff_sum > 0 else float("nan"),
            max_sample_norm=float(update.per_sample_norms.max()),
            rejected=state.last_rejected,
        ))
    trace.params = params
    trace.optimizer_state = state
    return trace

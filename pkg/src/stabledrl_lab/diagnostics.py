"""Drift tracking, the relative gradient spike indicator, tail-envelope checks and the stress protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .diffusion import MaskPattern, draw_patterns, estimate_elbo_pairwise, evaluate_patterns
from .rng import derive_rng

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 50
DEFAULT_DELTA = 0.3
DEFAULT_A0 = 0.5


# ---------------------------------------------------------------- traces

@dataclass
class DriftStep:
    inner_step: int
    drift: float | None
    spread: float | None
    update_norm: float
    log_ratios: np.ndarray
    spike: bool
    spike_threshold: float
    alpha_max: float = float("nan")
    max_sample_norm: float = float("nan")
    rejected: bool = False

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_ratios)


@dataclass
class DriftTrace:
    a0: float = DEFAULT_A0
    steps: list[DriftStep] = field(default_factory=list)
    params: object = None
    optimizer_state: object = None

    def __len__(self):
        return len(self.steps)

    @property
    def update_norms(self) -> np.ndarray:
        return np.array([s.update_norm for s in self.steps])

    @property
    def drifts(self) -> list:
        return [s.drift for s in self.steps]


# ---------------------------------------------------------------- spikes

@dataclass
class SpikeResult:
    spike: bool
    threshold: float
    warmup: bool


def spike_indicator(norm_history, current_norm: float, window: int = DEFAULT_WINDOW,
                    delta: float = DEFAULT_DELTA) -> SpikeResult:
    """``current > (1+delta) * mean(last window norms)``; false during warm-up."""
    hist = np.asarray(norm_history, dtype=np.float64)
    if len(hist) < window:
        return SpikeResult(False, float("nan"), True)
    threshold = (1.0 + delta) * float(hist[-window:].mean())
    return SpikeResult(bool(current_norm > threshold), threshold, False)


def spike_series(norms, window: int = DEFAULT_WINDOW, delta: float = DEFAULT_DELTA):
    """Spike flag and threshold for every entry of a norm series (NaN entries are skipped)."""
    flags, thresholds, history = [], [], []
    for x in norms:
        if not np.isfinite(x):
            flags.append(False)
            thresholds.append(float("nan"))
            continue
        res = spike_indicator(history, x, window, delta)
        flags.append(res.spike)
        thresholds.append(res.threshold)
        history.append(x)
    return np.array(flags, dtype=bool), np.array(thresholds)


def spike_rate(norms, window: int = DEFAULT_WINDOW, delta: float = DEFAULT_DELTA) -> float:
    flags, thresholds = spike_series(norms, window, delta)
    live = np.isfinite(thresholds)
    return float(flags[live].mean()) if live.any() else 0.0


# ---------------------------------------------------------------- tail envelopes

ENVELOPE_FAMILIES = ("gaussian", "laplace", "student_t")


@dataclass(frozen=True)
class TailEnvelope:
    family: str = "gaussian"
    scale: float = 1.0
    nu: float = 4.0

    def __post_init__(self):
        if self.family not in ENVELOPE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.scale <= 0 or self.nu <= 0:
            raise ValueError("scale and nu must be positive")

    @property
    def dist(self):
        if self.family == "gaussian":
            return stats.norm(scale=self.scale)
        if self.family == "laplace":
            return stats.laplace(scale=self.scale)
        return stats.t(df=self.nu, scale=self.scale)

    def sf(self, z):
        return self.dist.sf(z)

    def isf(self, q):
        return self.dist.isf(q)

    def sample(self, rng, size):
        if self.family == "gaussian":
            return rng.normal(0.0, self.scale, size)
        if self.family == "laplace":
            return rng.laplace(0.0, self.scale, size)
        return self.scale * rng.standard_t(self.nu, size)


@dataclass(frozen=True)
class LowerEnvelope:
    """Pointwise minimum of several survival functions (a common lower envelope)."""
    components: tuple

    def sf(self, z):
        return np.min([c.sf(z) for c in self.components], axis=0)


# ---------------------------------------------------------------- Monte-Carlo checks

@dataclass
class ExceedanceResult:
    frequency: float
    analytic: float
    z_score: float
    trials: int

    @property
    def within_3sigma(self) -> bool:
        return abs(self.z_score) <= 3.0


def verify_exceedance_identity(envelope: TailEnvelope, drift: float, u: float, trials: int = 100_000,
                               seed=0) -> ExceedanceResult:
    if u <= 0:
        raise ValueError("threshold u must be positive")
    if trials < 10_000:
        raise ValueError("need at least 1e4 trials")
    noise = envelope.sample(derive_rng(seed, "exceedance", envelope.family, drift, u), trials)
    with np.errstate(over="ignore"):
        rho = np.exp(drift + noise)
    freq = float(np.mean(rho >= u))
    p = float(envelope.sf(math.log(u) - drift))
    sd = math.sqrt(max(p * (1 - p), 1e-300) / trials)
    return ExceedanceResult(freq, p, (freq - p) / sd, trials)


@dataclass(frozen=True)
class GroupConfig:
    """Simulation constants for the dominance check (C1-C5 hold by construction)."""
    G: int = 8
    a0: float = DEFAULT_A0
    b0: float = 1.0
    B: float = 1.0
    W: float = 2.0
    drift: float = 0.0
    dim: int = 8


@dataclass
class DominanceRow:
    u: float
    in_regime: bool
    probability: float
    stderr: float
    spike_probability: float

    @property
    def holds(self) -> bool:
        return self.probability >= 0.5 - 3 * self.stderr


@dataclass
class DominanceReport:
    u0: float
    rows: list[DominanceRow]

    @property
    def passed(self) -> bool:
        return all(r.holds for r in self.rows if r.in_regime)

    @property
    def below_threshold(self) -> list[float]:
        return [r.u for r in self.rows if not r.holds]


def dominance_threshold(cfg: GroupConfig, lam: float) -> float:
    if not 0.0 <= lam < 1.0:
        raise ValueError("lambda must lie in [0, 1)")
    if lam == 0.0:
        raise ValueError("lambda = 0 makes u0 infinite")
    return 2.0 * cfg.B * cfg.W / (lam * cfg.a0 * cfg.b0)


def verify_dominance_lemma(envelope: TailEnvelope, group_config: GroupConfig, lam: float, u_grid,
                           trials: int = 100_000, seed=0) -> DominanceReport:
    """Estimate P(||r|| <= lam*u*a0*b0/G | rho_dagger >= u) for each u.

    Residual weights are i.i.d. exponential with mean W/(G-1) attached to
    directions of norm B; the maximiser's ratio is drawn from its exceedance
    law with inverse-survival sampling.  Rows with u >= u0 are the ones the
    lemma covers.
    """
    cfg = group_config
    u0 = dominance_threshold(cfg, lam)
    rows = []
    for k, u in enumerate(u_grid):
        rng = derive_rng(seed, "dominance", k)
        n_res = cfg.G - 1
        if cfg.W > 0:
            m = rng.exponential(cfg.W / n_res, size=(trials, n_res))
        else:
            m = np.zeros((trials, n_res))
        dirs = rng.normal(size=(trials, n_res, cfg.dim))
        dirs *= cfg.B / np.linalg.norm(dirs, axis=2, keepdims=True)
        resid = np.einsum("tj,tjd->td", m, dirs) / cfg.G
        small = np.linalg.norm(resid, axis=1) <= lam * u * cfg.a0 * cfg.b0 / cfg.G
        # maximiser ratio conditioned on rho >= u
        z = math.log(u) - cfg.drift
        tail = envelope.sf(z)
        eta = envelope.isf(tail * rng.random(trials))
        rho = np.exp(cfg.drift + np.maximum(eta, z))
        lead = rng.normal(size=(trials, cfg.dim))
        lead *= cfg.b0 / np.linalg.norm(lead, axis=1, keepdims=True)
        total = -(rho * cfg.a0)[:, None] * lead / cfg.G + resid
        spike_h = (1 - lam) * u * cfg.a0 * cfg.b0 / cfg.G
        p = float(small.mean())
        rows.append(DominanceRow(float(u), bool(u >= u0), p, math.sqrt(max(p * (1 - p), 0.25 / trials) / trials),
                                 float(np.mean(np.linalg.norm(total, axis=1) >= spike_h))))
    return DominanceReport(u0, rows)


def spike_probability_lower_bound(envelope, drift_state: float, H: float, cfg: GroupConfig, lam: float,
                                  upper: float) -> float:
    """Analytic P_i(H) = F(log u_H - D_i) / 2 with u_H = max(upper, G H/((1-lam) a0 b0), u0)."""
    u_h = max(upper, cfg.G * H / ((1 - lam) * cfg.a0 * cfg.b0), dominance_threshold(cfg, lam))
    return 0.5 * float(envelope.sf(math.log(u_h) - drift_state))


# ---------------------------------------------------------------- stress protocol

@dataclass(frozen=True)
class StressConfig:
    gamma: float = 0.7
    beta: float = 6.0
    t_min: int = 1
    t_max: int | None = None  # None: the full response length
    policy: str = "random"

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.t_min < 1 or (self.t_max is not None and self.t_max < self.t_min):
            raise ValueError("need 1 <= t_min <= t_max")
        if self.policy not in ("random", "block"):
            raise ValueError(f"unknown stress policy {self.policy!r}")


def num_stressed(G: int, gamma: float) -> int:
    return min(G, math.ceil(gamma * G - 1e-9))


def stressed_indices(G: int, gamma: float, rng) -> np.ndarray:
    k = num_stressed(G, gamma)
    if k == 0 and gamma > 0:
        log.info("gamma*G rounds to zero; stress degenerates to the normal condition")
    return np.sort(rng.choice(G, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def stress_patterns(x, m: int, config: StressConfig, seed, block_size: int, side: str) -> list[MaskPattern]:
    """Easy (numerator) or hard (denominator) patterns for one stressed sample."""
    length = len(x) - x.prompt_len
    if config.policy == "block":
        if length % block_size:
            raise ValueError("block stress policy needs block_size | response length")
        masked = np.zeros(length, dtype=bool)
        if side == "numerator":
            masked[length - block_size:] = True
        else:
            masked[:block_size] = True
        t = block_size / length
        return [MaskPattern(t, masked, "blockwise", 1.0 / t)]
    t_max = length if config.t_max is None else min(config.t_max, length)
    count = min(config.t_min, length) if side == "numerator" else t_max
    policy = "tail_biased" if side == "numerator" else "head_biased"
    return draw_patterns(x, m, policy, seed, block_size=block_size, beta=config.beta, count=count)


@dataclass
class StressedGroup:
    group: object
    stressed: np.ndarray
    old_patterns: list


def pairwise_seed(seed, j):
    return derive_rng(seed, "pair", j).integers(2**63)


def stress_weights(group, config: StressConfig, seed, *, params_new, params_old, m: int = 2,
                   arch: str = "full", coupling: str = "independent", t_floor: float = 0.15) -> StressedGroup:
    """ELBO pairs with the asymmetric masking protocol applied to ceil(gamma*G) samples.

    Rewards, advantages and tokens are untouched; only mask draws change.
    Unstressed samples use exactly the standard pairwise estimate.
    """
    if not group.rollouts:
        raise ValueError("stress protocol needs completed rollouts")
    G = len(group.rollouts)
    stressed = stressed_indices(G, config.gamma, derive_rng(seed, "stress-select"))
    new = np.empty(G)
    old = np.empty(G)
    old_patterns = []
    bs = params_old.block_size
    for j, x in enumerate(group.rollouts):
        s = pairwise_seed(seed, j)
        if j in stressed:
            num = stress_patterns(x, m, config, derive_rng(s, "num").integers(2**63), bs, "numerator")
            den = stress_patterns(x, m, config, derive_rng(s, "den").integers(2**63), bs, "denominator")
            new[j] = evaluate_patterns(params_new, x, num, arch).value
            e_old = evaluate_patterns(params_old, x, den, arch)
        else:
            e_new, e_old = estimate_elbo_pairwise(params_new, params_old, x, m, "uniform", s, coupling, arch,
                                                  t_floor=t_floor)
            new[j] = e_new.value
        old[j] = e_old.value
        old_patterns.append(e_old.patterns)
    out = replace(group, elbo_new=new, elbo_old=old)
    return StressedGroup(out, stressed, old_patterns)


# ---------------------------------------------------------------- drift state

def measure_drift_state(group, params, params_old, a0: float = DEFAULT_A0, m: int = 64, seed=0,
                        arch: str = "full"):
    """(D_i, S_i) over the negative set {A_j <= -a0}; None when that set is empty.

    Each Delta L_j is a shared-mask difference of m-sample ELBOs, so identical
    parameters give exactly zero.
    """
    if a0 <= 0:
        raise ValueError("a0 must be positive")
    neg = np.flatnonzero(np.asarray(group.advantages) <= -a0)
    if len(neg) == 0:
        return None
    deltas = []
    for j in neg:
        x = group.rollouts[j]
        pats = draw_patterns(x, m, "uniform", derive_rng(seed, "drift", int(j)).integers(2**63),
                             block_size=params.block_size)
        deltas.append(evaluate_patterns(params, x, pats, arch).value - evaluate_patterns(params_old, x, pats, arch).value)
    deltas = np.array(deltas)
    return float(deltas.max()), float(deltas.max() - deltas.min())

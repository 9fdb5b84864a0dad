"""Runnable property checks: estimator bounds, tail lemmas, staircase equivalence, gradients.

Each check returns a :class:`CheckResult`; ``run_checks`` drives them for the
CLI's ``verify`` subcommand and the acceptance suite.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .diagnostics import GroupConfig, TailEnvelope, verify_dominance_lemma, verify_exceedance_identity
from .diffusion import apply_pattern, draw_patterns, elbo_surrogate
from .estimators import RolloutGroup, compute_advantages, elbo_gradient, group_update
from .model import PARAM_ORDER, TokenSequence, init_params
from .ratios import LogRatioSet, clip_log_ratios, clip_then_softmax, upper_weight
from .rng import derive_rng
from .staircase import iterative_reference, staircase_block_logprobs, staircase_forward


@dataclass
class CheckResult:
    name: str
    passed: bool
    summary: str
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.summary}"


# ---------------------------------------------------------------- estimator bounds

def fuzz_group(rng, max_g=32, dim=8, log_ratio_range=math.log(1e6)):
    G = int(rng.integers(2, max_g + 1))
    log_ratios = rng.uniform(-log_ratio_range, log_ratio_range, G)
    adv = compute_advantages(rng.normal(size=G))
    grads = rng.normal(size=(G, dim)) * np.exp(rng.normal(size=(G, 1)))
    if rng.random() < 0.5:
        clip = ("linear", float(rng.uniform(0.05, 0.95)))
    else:
        clip = ("log_symmetric", float(rng.uniform(0.1, 8.0)))
    return RolloutGroup.from_log_ratios(adv, log_ratios), grads, clip


def check_estimator_bounds(num_groups: int = 100_000, seed=0, slack: float = 1e-9) -> list[CheckResult]:
    """Convex hull, saturation bound and scale decomposition on one shared fuzz set."""
    rng = derive_rng(seed, "fuzz-bounds")
    hull_bad = sat_bad = scale_bad = 0
    worst_hull = worst_sat = worst_scale = 0.0
    start = time.perf_counter()
    for _ in range(num_groups):
        group, grads, (space, eps) = fuzz_group(rng)
        sd = group_update(group, grads, "stabledrl", eps, space)
        uc = group_update(group, grads, "uc_grpo", eps, space)
        bmax = sd.per_sample_norms.max()
        hull = sd.norm / bmax if bmax > 0 else 0.0
        sat = uc.norm / (upper_weight(eps, space) * bmax) if bmax > 0 else 0.0
        mean_w = np.exp(clip_log_ratios(group.log_ratios, eps, space)).mean()
        diff = np.linalg.norm(uc.direction - mean_w * sd.direction)
        rel = diff / uc.norm if uc.norm > 0 else diff
        worst_hull, worst_sat, worst_scale = max(worst_hull, hull), max(worst_sat, sat), max(worst_scale, rel)
        hull_bad += hull > 1 + slack
        sat_bad += sat > 1 + slack
        scale_bad += rel >= 1e-12
    elapsed = time.perf_counter() - start
    return [
        CheckResult("convex_hull", hull_bad == 0,
                    f"{hull_bad} violations in {num_groups} groups, max ratio {worst_hull:.12f}, {elapsed:.1f}s",
                    {"violations": hull_bad, "worst": worst_hull, "seconds": elapsed}),
        CheckResult("saturation", sat_bad == 0,
                    f"{sat_bad} violations, max ||uc||/H_max {worst_sat:.12f}",
                    {"violations": sat_bad, "worst": worst_sat}),
        CheckResult("scale_decomposition", scale_bad == 0,
                    f"{scale_bad} groups at rel. error >= 1e-12, worst {worst_scale:.2e}",
                    {"violations": scale_bad, "worst": worst_scale}),
    ]


def check_grpo_unbounded(bounds=(10.0, 1e3, 1e6), seed=0) -> CheckResult:
    """A single negative-advantage sample with ratio 10*C*G/(a0*b0) pushes ||grpo|| past C."""
    rng = derive_rng(seed, "grpo-unbounded")
    ok, notes = True, []
    for space, eps in (("linear", 0.2), ("log_symmetric", 5.0)):
        for C in bounds:
            G = 4
            adv = compute_advantages([1.0, 1.0, 1.0, 0.0])
            h = rng.normal(size=(G, 8))
            h /= np.linalg.norm(h, axis=1, keepdims=True)  # b0 = 1
            a0 = abs(adv[3])
            log_ratios = np.zeros(G)
            log_ratios[3] = math.log(10 * C * G / a0)
            group = RolloutGroup.from_log_ratios(adv, log_ratios)
            grpo = group_update(group, h, "grpo", eps, space)
            uc = group_update(group, h, "uc_grpo", eps, space)
            sd = group_update(group, h, "stabledrl", eps, space)
            bmax = sd.per_sample_norms.max()
            good = (grpo.norm > C and uc.norm <= upper_weight(eps, space) * bmax * (1 + 1e-9)
                    and sd.norm <= bmax * (1 + 1e-9))
            ok &= bool(good)
            notes.append(f"{space} C={C:g}: grpo={grpo.norm:.3g}")
    return CheckResult("grpo_unbounded", ok, "; ".join(notes))


def check_clip_stability(num_groups: int = 10_000, seed=0, span: float = 1e6) -> CheckResult:
    rng = derive_rng(seed, "clip-stability")
    bad, worst = 0, 0.0
    for k in range(num_groups):
        G = int(rng.integers(2, 33))
        space = ("linear", "log_symmetric", "log_upper")[k % 3]
        eps = float(rng.uniform(0.05, 0.95)) if space == "linear" else float(rng.uniform(0.1, 10))
        alphas = clip_then_softmax(LogRatioSet(rng.uniform(-span, span, G), eps, space)).alphas
        err = abs(alphas.sum() - 1.0)
        worst = max(worst, err)
        bad += (not np.isfinite(alphas).all()) or err > 1e-12
    return CheckResult("clip_stability", bad == 0, f"{bad} bad groups of {num_groups}, worst |sum-1| {worst:.1e}",
                       {"violations": bad, "worst": worst})


# ---------------------------------------------------------------- tail lemmas

EXCEEDANCE_ENVELOPES = (TailEnvelope("gaussian"), TailEnvelope("laplace"), TailEnvelope("student_t", nu=4.0))
EXCEEDANCE_DRIFTS = (-2.0, -1.0, 0.0, 1.0, 2.0)
EXCEEDANCE_US = (0.25, 0.5, 1.0, 2.0, math.e, 5.0, 10.0)


def check_exceedance(trials: int = 100_000, seed=0, max_fail_fraction: float = 0.01) -> CheckResult:
    cells = [(env, d, u) for env in EXCEEDANCE_ENVELOPES for d in EXCEEDANCE_DRIFTS for u in EXCEEDANCE_US]
    start = time.perf_counter()
    results = [verify_exceedance_identity(env, d, u, trials, seed) for env, d, u in cells]
    elapsed = time.perf_counter() - start
    fails = sum(not r.within_3sigma for r in results)
    allowed = math.floor(max_fail_fraction * len(cells))
    worst = max(abs(r.z_score) for r in results)
    return CheckResult("exceedance", fails <= allowed,
                       f"{fails}/{len(cells)} cells beyond 3 sigma (allowed {allowed}), max |z| {worst:.2f}, "
                       f"{elapsed:.1f}s", {"fails": fails, "cells": len(cells), "seconds": elapsed})


def check_dominance(trials: int = 100_000, seed=0, lam: float = 0.5) -> CheckResult:
    cfg = GroupConfig()
    u0 = 2 * cfg.B * cfg.W / (lam * cfg.a0 * cfg.b0)
    report = verify_dominance_lemma(TailEnvelope("gaussian"), cfg, lam, [u0 * f for f in (0.1, 0.5, 1, 2, 5)],
                                    trials, seed)
    rows = ", ".join(f"u={r.u:.3g}:{r.probability:.3f}" for r in report.rows)
    return CheckResult("dominance", report.passed, f"u0={report.u0:.3g}; {rows}",
                       {"below_threshold": report.below_threshold})


# ---------------------------------------------------------------- staircase

def staircase_case(seed, case, K: int, block_size: int = 2, vocab_size: int = 9, embed_dim: int = 8):
    rng = derive_rng(seed, "staircase-case", case, K)
    n = K * block_size
    params = init_params(vocab_size, embed_dim, max(n, 2), block_size, seed=int(rng.integers(2**31)))
    clean = TokenSequence(rng.integers(0, params.num_symbols, n), 0)
    pattern = draw_patterns(clean, 1, "uniform", int(rng.integers(2**31)))[0]
    return params, clean, apply_pattern(clean, pattern, params.mask_id)


def leakage_gradient(params, clean, corrupted, k: int, rng) -> float:
    """Largest |d(block-k target log-probs)/d(clean hidden rows of blocks >= k)|."""
    bs = params.block_size
    n = len(clean)
    tape = Tape()
    _, hidden, logp = staircase_forward(tape, params, clean, corrupted)
    rows = np.repeat(np.arange(n + k * bs, n + (k + 1) * bs), params.num_symbols)
    cols = np.tile(np.arange(params.num_symbols), bs)
    out = tape.gather(logp, rows, cols, rng.normal(size=len(rows)))
    backward(tape, output=out)
    g = tape.grads[hidden.index]
    return float(np.abs(g[k * bs:n]).max())


def check_staircase(cases: int = 100, seed=0, timing_reps: int = 5) -> CheckResult:
    worst_diff, worst_leak = 0.0, 0.0
    for c in range(cases):
        K = (1, 2, 4, 8)[c % 4]
        params, clean, corrupted = staircase_case(seed, c, K)
        diff = np.abs(staircase_block_logprobs(params, clean, corrupted)
                      - iterative_reference(params, clean, corrupted)).max()
        worst_diff = max(worst_diff, float(diff))
        rng = derive_rng(seed, "leak", c)
        worst_leak = max(worst_leak, leakage_gradient(params, clean, corrupted, int(rng.integers(K)), rng))
    speedup = staircase_speedup(seed, timing_reps)
    ok = worst_diff <= 1e-10 and worst_leak == 0.0 and speedup >= 4.0
    return CheckResult("staircase", ok, f"max |single - iterative| {worst_diff:.1e}, max leakage grad "
                                        f"{worst_leak:.1e}, speedup at K=16 {speedup:.1f}x",
                       {"max_diff": worst_diff, "max_leak": worst_leak, "speedup": speedup})


def staircase_speedup(seed=0, reps: int = 5, K: int = 16, block_size: int = 4, embed_dim: int = 16) -> float:
    params, clean, corrupted = staircase_case(seed, "timing", K, block_size, 33, embed_dim)

    def best(fn):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(params, clean, corrupted)
            times.append(time.perf_counter() - t0)
        return min(times)

    staircase_block_logprobs(params, clean, corrupted)  # warm caches
    return best(iterative_reference) / best(staircase_block_logprobs)


# ---------------------------------------------------------------- gradients

def surrogate_value(params, x, patterns, arch) -> float:
    tape = Tape(record=False)
    return float(elbo_surrogate(tape, params, x, patterns, arch).value)


def finite_difference(params, x, patterns, arch, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central difference of the ELBO surrogate for every parameter coordinate."""
    theta = params.to_vector()
    out = np.empty_like(theta)
    for i in range(theta.size):
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            t = theta.copy()
            t[i] += step
            vals.append(surrogate_value(params.from_vector(t), x, patterns, arch))
        out[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
    return out


def gradient_case(seed, case=0):
    rng = derive_rng(seed, "grad-case", case)
    arch = ("full", "block")[int(rng.integers(2))]
    bs = 2
    plen = int(rng.choice([2, 4]))
    rlen = int(rng.choice([2, 4]))
    vocab = int(rng.integers(4, 8))
    params = init_params(vocab, int(rng.integers(3, 7)), plen + rlen, bs, seed=int(rng.integers(2**31)))
    x = TokenSequence(rng.integers(0, params.num_symbols, plen + rlen), plen)
    policy = ("uniform", "blockwise")[int(rng.integers(2))]
    patterns = draw_patterns(x, int(rng.integers(1, 3)), policy, int(rng.integers(2**31)), block_size=bs)
    return params, x, patterns, arch


def gradient_errors(analytic, numeric, tiny: float = 1e-8):
    """Per-coordinate error: relative, or absolute where |analytic| < tiny."""
    abs_err = np.abs(analytic - numeric)
    small = np.abs(analytic) < tiny
    rel = np.where(small, 0.0, abs_err / np.maximum(np.abs(analytic), tiny))
    return rel, np.where(small, abs_err, 0.0)


def check_gradients(cases: int = 100, seed=0) -> CheckResult:
    worst_rel = worst_abs = 0.0
    bad = 0
    for c in range(cases):
        params, x, patterns, arch = gradient_case(seed, c)
        analytic = elbo_gradient(params, x, patterns, arch)
        rel, absolute = gradient_errors(analytic, finite_difference(params, x, patterns, arch))
        worst_rel, worst_abs = max(worst_rel, rel.max()), max(worst_abs, absolute.max())
        bad += bool((rel >= 1e-4).any() or (absolute >= 1e-8).any())
    return CheckResult("gradient", bad == 0, f"{bad}/{cases} configurations out of tolerance, worst rel "
                                             f"{worst_rel:.1e}, worst abs (tiny coords) {worst_abs:.1e}",
                       {"bad": bad, "worst_rel": worst_rel})


# ---------------------------------------------------------------- registry

CHECKS = ("convex_hull", "saturation", "scale_decomposition", "grpo_unbounded", "clip_stability",
          "exceedance", "dominance", "staircase", "gradient")


def run_checks(name: str = "all", seed=0, quick: bool = False) -> list[CheckResult]:
    if name != "all" and name not in CHECKS:
        raise ValueError(f"unknown check {name!r}; choose from all, {', '.join(CHECKS)}")
    want = set(CHECKS) if name == "all" else {name}
    out = []
    if want & {"convex_hull", "saturation", "scale_decomposition"}:
        out += [r for r in check_estimator_bounds(2_000 if quick else 100_000, seed) if r.name in want]
    if "grpo_unbounded" in want:
        out.append(check_grpo_unbounded(seed=seed))
    if "clip_stability" in want:
        out.append(check_clip_stability(1_000 if quick else 10_000, seed))
    if "exceedance" in want:
        out.append(check_exceedance(10_000 if quick else 100_000, seed))
    if "dominance" in want:
        out.append(check_dominance(10_000 if quick else 100_000, seed))
    if "staircase" in want:
        out.append(check_staircase(12 if quick else 100, seed))
    if "gradient" in want:
        out.append(check_gradients(5 if quick else 100, seed))
    return out

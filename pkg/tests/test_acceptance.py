"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

The lines are collected into the "acceptance criteria" section of the
pytest terminal summary (and printed live under ``-s``).
"""
import csv
import io
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from stabledrl_lab.config import RunConfig
from stabledrl_lab.ratios import upper_weight
from stabledrl_lab.runner import export_plot_data, read_metrics, read_status, run_experiment, summarize_run
from stabledrl_lab.verification import (
    check_clip_stability, check_estimator_bounds, check_exceedance, check_gradients, check_grpo_unbounded,
    check_staircase,
)

# copy-task stress setting shared by criteria 9 and 10
STRESS = RunConfig(task="copy", vocab_size=5, embed_dim=32, optimizer="sgd", lr=0.0005, total_steps=600,
                   condition="exploding", stress_gamma=0.7, stress_beta=6.0, spike_window=50, spike_delta=0.3)
PAIRS = 20


def report(number, passed, summary):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {summary}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    assert passed, summary


@pytest.fixture(scope="module")
def bounds():
    start = time.perf_counter()
    results = {r.name: r for r in check_estimator_bounds(100_000, seed=0)}
    return results, time.perf_counter() - start


def test_criterion_01_convex_hull(bounds):
    results, elapsed = bounds
    r = results["convex_hull"]
    report(1, r.passed and elapsed < 60, f"{r.summary} (limit 60s)")


def test_criterion_02_saturation(bounds):
    r = bounds[0]["saturation"]
    report(2, r.passed, r.summary)


def test_criterion_03_scale_decomposition(bounds):
    r = bounds[0]["scale_decomposition"]
    report(3, r.passed, r.summary)


def test_criterion_04_grpo_unbounded():
    r = check_grpo_unbounded((10.0, 1e3, 1e6), seed=0)
    report(4, r.passed, r.summary)


def test_criterion_05_exceedance():
    start = time.perf_counter()
    r = check_exceedance(100_000, seed=0)
    elapsed = time.perf_counter() - start
    report(5, r.passed and elapsed < 120, f"{r.summary}; {elapsed:.1f}s (limit 120s)")


def test_criterion_06_staircase():
    r = check_staircase(100, seed=0)
    report(6, r.passed, r.summary)


def test_criterion_07_gradients():
    r = check_gradients(100, seed=0)
    report(7, r.passed, r.summary)


def test_criterion_08_clip_stability():
    r = check_clip_stability(10_000, seed=0)
    report(8, r.passed, r.summary)


@pytest.fixture(scope="module")
def stress_pairs(tmp_path_factory):
    root = tmp_path_factory.mktemp("stress")
    start = time.perf_counter()
    pairs = []
    for seed in range(PAIRS):
        pair = {}
        for est in ("grpo", "stabledrl"):
            pair[est] = summarize_run(run_experiment(STRESS.replace(estimator=est, seed=seed), root / f"{est}_{seed}"))
        pairs.append(pair)
    return pairs, time.perf_counter() - start


def test_criterion_09_stress_dynamics(stress_pairs):
    pairs, elapsed = stress_pairs
    grpo_worse = sum(p["grpo"]["status"] == "collapsed" or p["grpo"]["spike_rate"] > 2 * p["stabledrl"]["spike_rate"]
                     for p in pairs)
    grpo_collapsed = sum(p["grpo"]["status"] == "collapsed" for p in pairs)
    sd_improved = sum(p["stabledrl"]["reward_final"] >= p["stabledrl"]["reward_initial"] for p in pairs)
    sd_collapsed = sum(p["stabledrl"]["status"] == "collapsed" for p in pairs)
    ok = grpo_worse >= 15 and sd_improved >= 18 and elapsed < 1800
    report(9, ok, f"grpo collapsed or >2x spike rate in {grpo_worse}/{PAIRS} pairs (need 15; {grpo_collapsed} "
                  f"collapsed); stabledrl final >= initial reward in {sd_improved}/{PAIRS} (need 18; "
                  f"{sd_collapsed} collapsed); {elapsed / 60:.1f} min (limit 30)")


def _csv(run_dir, kind):
    rows = list(csv.reader(io.StringIO(export_plot_data(run_dir, kind))))
    return [[float(v) if i < 2 else v for i, v in enumerate(r)] for r in rows[1:]]


@pytest.fixture(scope="module")
def triple(tmp_path_factory):
    root = tmp_path_factory.mktemp("triple")
    return {est: run_experiment(STRESS.replace(estimator=est, seed=0), root / est)
            for est in ("grpo", "uc_grpo", "stabledrl")}


def test_criterion_10_stability_trends(triple, tmp_path):
    # grpo: exported threshold curve, final vs first post-warm-up value
    thr = _csv(triple["grpo"], "threshold_curve")
    grpo_ok = len(thr) >= 2 and thr[-1][1] > 3 * thr[0][1]
    grpo_note = f"grpo threshold {thr[0][1]:.3g} -> {thr[-1][1]:.3g}" if thr else "grpo threshold never left warm-up"

    # uc_grpo: post-warm-up update norms against H_max = (1+eps) max_j ||A_j g_j||
    cfg = STRESS
    rows = [r for r in read_metrics(triple["uc_grpo"]) if r["rejected_step"] == "0"]
    post = rows[cfg.spike_window:]
    h_scale = upper_weight(cfg.epsilon, cfg.clip_space)
    near = [float(r["update_norm"]) > 0.9 * h_scale * float(r["max_sample_norm"]) for r in post]
    frac = float(np.mean(near)) if near else 0.0
    uc_ok = bool(post) and frac >= 0.2

    # stabledrl: every update norm within the largest per-sample norm
    sd_rows = read_metrics(triple["stabledrl"])
    sd_bad = sum(float(r["update_norm"]) > float(r["max_sample_norm"]) * (1 + 1e-12) for r in sd_rows)
    sd_ok = sd_bad == 0

    statuses = ", ".join(f"{k}={read_status(v)['status']}" for k, v in triple.items())
    report(10, grpo_ok and uc_ok and sd_ok,
           f"{grpo_note} (need >3x); uc_grpo {frac:.1%} of {len(post)} post-warm-up steps above 0.9 H_max "
           f"(need 20%); stabledrl {sd_bad}/{len(sd_rows)} norms above max per-sample norm; {statuses}")

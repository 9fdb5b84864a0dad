import math

import numpy as np
import pytest
from scipy import stats

from stabledrl_lab.diagnostics import (
    GroupConfig, LowerEnvelope, StressConfig, TailEnvelope, dominance_threshold, measure_drift_state,
    num_stressed, pairwise_seed, spike_indicator, spike_probability_lower_bound, spike_rate, spike_series,
    stress_patterns, stress_weights, stressed_indices, verify_dominance_lemma, verify_exceedance_identity,
)
from stabledrl_lab.diffusion import estimate_elbo_pairwise
from stabledrl_lab.estimators import RolloutGroup, compute_advantages
from stabledrl_lab.model import TokenSequence, init_params, sample_rollout


def test_spike_indicator_by_hand():
    hist = [1.0, 2.0, 3.0]
    res = spike_indicator(hist, 2.7, window=3, delta=0.3)
    assert res.threshold == pytest.approx(2.6) and res.spike and not res.warmup
    assert not spike_indicator(hist, 2.6, window=3, delta=0.3).spike
    warm = spike_indicator(hist, 100.0, window=4)
    assert warm.warmup and not warm.spike and math.isnan(warm.threshold)


def test_spike_series_uses_only_trailing_window():
    flags, thr = spike_series([1, 1, 1, 10, 1, 1], window=2, delta=0.0)
    assert flags.tolist() == [False, False, False, True, False, False]
    assert thr[3] == 1.0 and thr[4] == 5.5
    assert spike_rate([1, 1, 1, 10, 1, 1], 2, 0.0) == 0.25


def test_spike_series_skips_rejected_entries():
    flags, thr = spike_series([1.0, float("nan"), 1.0, 5.0], window=2, delta=0.0)
    assert math.isnan(thr[1]) and not flags[1]
    assert flags[3] and thr[3] == 1.0


@pytest.mark.parametrize("family", ["gaussian", "laplace", "student_t"])
def test_envelope_survival_matches_scipy(family):
    env = TailEnvelope(family, 0.7)
    ref = {"gaussian": stats.norm(scale=0.7), "laplace": stats.laplace(scale=0.7),
           "student_t": stats.t(4, scale=0.7)}[family]
    z = np.linspace(-3, 3, 13)
    assert np.allclose(env.sf(z), ref.sf(z), rtol=1e-14)
    assert np.allclose(env.isf(env.sf(z)), z, atol=1e-9)
    sample = env.sample(np.random.default_rng(0), 50000)
    assert stats.kstest(sample, ref.cdf).pvalue > 1e-3


def test_lower_envelope_is_pointwise_min():
    a, b = TailEnvelope("gaussian", 1.0), TailEnvelope("laplace", 1.0)
    z = np.array([0.5, 3.0])
    env = LowerEnvelope((a, b))
    assert np.array_equal(env.sf(z), np.minimum(a.sf(z), b.sf(z)))


def test_envelope_validation():
    with pytest.raises(ValueError):
        TailEnvelope("cauchy")
    with pytest.raises(ValueError):
        TailEnvelope("gaussian", 0.0)


@pytest.mark.parametrize("family", ["gaussian", "laplace", "student_t"])
def test_exceedance_frequency_matches_survival(family):
    res = verify_exceedance_identity(TailEnvelope(family), drift=0.5, u=2.0, trials=50000, seed=1)
    assert res.within_3sigma
    assert res.analytic == pytest.approx(TailEnvelope(family).sf(math.log(2.0) - 0.5))


def test_exceedance_argument_checks():
    with pytest.raises(ValueError):
        verify_exceedance_identity(TailEnvelope(), 0.0, 0.0)
    with pytest.raises(ValueError):
        verify_exceedance_identity(TailEnvelope(), 0.0, 1.0, trials=100)


def test_dominance_threshold_and_markov_oracle():
    cfg = GroupConfig(G=8, a0=0.5, b0=1.0, B=1.0, W=2.0)
    assert dominance_threshold(cfg, 0.5) == pytest.approx(16.0)
    with pytest.raises(ValueError):
        dominance_threshold(cfg, 0.0)
    u0 = dominance_threshold(cfg, 0.5)
    rep = verify_dominance_lemma(TailEnvelope(), cfg, 0.5, [u0, 2 * u0], trials=20000, seed=0)
    for row in rep.rows:
        # Markov: P(||r|| > x) <= E||r|| / x <= W B / (G x)
        markov = 1 - cfg.W * cfg.B / (0.5 * row.u * cfg.a0 * cfg.b0)
        assert row.in_regime and row.probability >= markov - 3 * row.stderr
    assert rep.passed


def test_spike_probability_bound_by_hand():
    cfg = GroupConfig()
    env = TailEnvelope("laplace", 1.0)
    # u_H is the max of 1+eps, G H / ((1-lam) a0 b0) = 64 and u0 = 16
    p = spike_probability_lower_bound(env, 1.0, H=2.0, cfg=cfg, lam=0.5, upper=1.2)
    assert p == pytest.approx(0.5 * 0.5 * math.exp(-(math.log(64) - 1.0)))


def test_num_stressed_rounds_up_exactly():
    assert num_stressed(8, 0.7) == 6
    assert num_stressed(10, 0.7) == 7
    assert num_stressed(4, 0.5) == 2
    assert num_stressed(4, 0.0) == 0
    assert len(stressed_indices(8, 0.7, np.random.default_rng(0))) == 6


def test_stress_config_validation():
    with pytest.raises(ValueError):
        StressConfig(gamma=1.5)
    with pytest.raises(ValueError):
        StressConfig(t_min=3, t_max=2)
    with pytest.raises(ValueError):
        StressConfig(policy="other")


def test_stress_patterns_are_asymmetric():
    x = TokenSequence([0, 1, 2, 3, 0, 1, 2, 3], 2)
    num = stress_patterns(x, 4, StressConfig(), 0, 2, "numerator")
    den = stress_patterns(x, 4, StressConfig(), 0, 2, "denominator")
    assert all(p.num_masked == 1 for p in num) and all(p.masked.all() for p in den)
    blk_num = stress_patterns(x, 1, StressConfig(policy="block"), 0, 2, "numerator")[0]
    blk_den = stress_patterns(x, 1, StressConfig(policy="block"), 0, 2, "denominator")[0]
    assert blk_num.masked.tolist() == [False] * 4 + [True] * 2
    assert blk_den.masked.tolist() == [True] * 2 + [False] * 4


def _group(params, G=6):
    prompt = TokenSequence([0, 1, 2, 3], 4)
    rollouts = [sample_rollout(params, prompt, 4, 2, 2, 1.0, seed=j) for j in range(G)]
    rewards = np.linspace(0, 1, G)
    return RolloutGroup(compute_advantages(rewards), np.zeros(G), np.zeros(G), rollouts, rewards, prompt)


def test_stress_only_touches_selected_samples():
    params = init_params(5, 8, 8, 2, seed=0)
    grp = _group(params)
    sg = stress_weights(grp, StressConfig(gamma=0.5), 3, params_new=params, params_old=params)
    assert len(sg.stressed) == 3
    assert np.array_equal(sg.group.advantages, grp.advantages)
    for j in range(6):
        if j in sg.stressed:
            # one easy tail token against the whole response: the ratio is pushed up
            assert sg.group.log_ratios[j] > 0
        else:
            new, old = estimate_elbo_pairwise(params, params, grp.rollouts[j], 2, "uniform", pairwise_seed(3, j))
            assert sg.group.elbo_new[j] == new.value and sg.group.elbo_old[j] == old.value


def test_no_stress_at_gamma_zero():
    params = init_params(5, 8, 8, 2, seed=0)
    sg = stress_weights(_group(params), StressConfig(gamma=0.0), 0, params_new=params, params_old=params)
    assert len(sg.stressed) == 0


def test_drift_state_is_zero_for_identical_policies():
    params = init_params(5, 8, 8, 2, seed=0)
    grp = _group(params)
    assert measure_drift_state(grp, params, params, a0=0.5, m=4) == (0.0, 0.0)
    assert measure_drift_state(grp, params, params, a0=100.0, m=4) is None
    with pytest.raises(ValueError):
        measure_drift_state(grp, params, params, a0=0.0)

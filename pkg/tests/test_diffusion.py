import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stabledrl_lab.diffusion import (
    corrupt, draw_patterns, elbo_surrogate, estimate_elbo, estimate_elbo_pairwise, evaluate_patterns,
    sample_pattern,
)
from stabledrl_lab.autodiff import Tape, backward
from stabledrl_lab.model import TokenSequence, init_params, token_log_probs


@pytest.fixture
def params():
    return init_params(vocab_size=5, embed_dim=8, max_seq_len=8, block_size=2, seed=2)


@pytest.fixture
def x():
    return TokenSequence([0, 1, 2, 3, 1, 0], 2)


def test_full_mask_at_t_one():
    p = sample_pattern(np.random.default_rng(0), 5, 1.0)
    assert p.masked.all() and p.mc_weight == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.floats(1e-6, 1.0), st.integers(0, 2**31 - 1))
def test_uniform_pattern_always_masks_something(length, t, seed):
    p = sample_pattern(np.random.default_rng(seed), length, t)
    assert p.num_masked >= 1
    assert p.mc_weight == pytest.approx(1.0 / t)


def test_uniform_conditional_law_matches_enumeration():
    # exact P(mask | at least one) for length 3 against a Monte-Carlo histogram
    length, t, n = 3, 0.3, 40000
    rng = np.random.default_rng(1)
    counts = {}
    for _ in range(n):
        key = tuple(sample_pattern(rng, length, t).masked)
        counts[key] = counts.get(key, 0) + 1
    norm = 1 - (1 - t) ** length
    for key, c in counts.items():
        k = sum(key)
        exact = t**k * (1 - t) ** (length - k) / norm
        assert abs(c / n - exact) < 4 * math.sqrt(exact * (1 - exact) / n)


def test_blockwise_masks_trailing_blocks_and_weights_by_fraction():
    p = sample_pattern(np.random.default_rng(0), 6, 0.4, "blockwise", block_size=2)
    assert p.masked.tolist() == [False, False, True, True, True, True]
    assert p.t == pytest.approx(2 / 3) and p.mc_weight == pytest.approx(1.5)


def test_biased_policies_lean_to_their_side():
    rng = np.random.default_rng(0)
    head = np.mean([np.flatnonzero(sample_pattern(rng, 10, 0.1, "head_biased", beta=6.0).masked)[0]
                    for _ in range(2000)])
    tail = np.mean([np.flatnonzero(sample_pattern(rng, 10, 0.1, "tail_biased", beta=6.0).masked)[0]
                    for _ in range(2000)])
    assert head < 2.5 < 6.5 < tail


def test_invalid_inputs():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_pattern(rng, 4, 0.0)
    with pytest.raises(ValueError):
        sample_pattern(rng, 4, 0.5, "nope")
    with pytest.raises(ValueError):
        sample_pattern(rng, 5, 0.5, "blockwise", block_size=2)


def test_corrupt_only_touches_response(x):
    c, pattern = corrupt(x, 1.0, seed=0, mask_id=4)
    assert c.tokens[:2].tolist() == [0, 1] and (c.tokens[2:] == 4).all()
    assert pattern.num_masked == 4


def test_single_pattern_value_is_hand_computable(params, x):
    pattern = sample_pattern(np.random.default_rng(3), 4, 0.5)
    est = evaluate_patterns(params, x, [pattern])
    tokens = x.tokens.copy()
    tokens[2:][pattern.masked] = params.mask_id
    logp = token_log_probs(params, tokens)
    pos = 2 + np.flatnonzero(pattern.masked)
    assert est.value == pytest.approx(logp[pos, x.tokens[pos]].sum() / pattern.t, rel=1e-12)


def test_estimates_split_and_recombine_exactly(params, x):
    whole = estimate_elbo(params, x, m=4, seed=9)
    a = estimate_elbo(params, x, m=2, seed=9)
    b = estimate_elbo(params, x, m=2, seed=9, offset=2)
    assert np.array_equal(whole.per_sample_values, np.concatenate([a.per_sample_values, b.per_sample_values]))


def test_t_is_drawn_above_the_floor(x):
    ts = [p.t for p in draw_patterns(x, 500, "uniform", 0, t_floor=0.15)]
    assert min(ts) >= 0.15 and max(ts) <= 1.0


def test_elbo_is_a_lower_bound_on_exact_log_likelihood_in_expectation():
    # one response token: ELBO == log p(x | prompt, mask) exactly for every pattern
    p = init_params(vocab_size=5, embed_dim=8, max_seq_len=4, seed=0)
    x = TokenSequence([0, 1, 2], 2)
    est = estimate_elbo(p, x, m=8, seed=0)
    logp = token_log_probs(p, np.array([0, 1, 4]))[2, 2]
    for v, pat in zip(est.per_sample_values, est.patterns):
        assert v == pytest.approx(logp / pat.t)


def test_shared_masks_coupling_gives_zero_ratio_for_identical_policies(params, x):
    new, old = estimate_elbo_pairwise(params, params, x, m=3, seed=4, coupling="shared_masks")
    assert new.value == old.value
    new, old = estimate_elbo_pairwise(params, params, x, m=3, seed=4, coupling="independent")
    assert new.value != old.value


def test_mask_token_in_scored_sequence_is_rejected(params):
    with pytest.raises(ValueError):
        estimate_elbo(params, TokenSequence([0, 4, 1], 1))


@pytest.mark.parametrize("arch", ["full", "block"])
def test_surrogate_value_matches_estimate(params, x, arch):
    patterns = draw_patterns(x, 3, "uniform", 1)
    tape = Tape()
    out = elbo_surrogate(tape, params, x, patterns, arch)
    assert float(out.value) == pytest.approx(evaluate_patterns(params, x, patterns, arch).value, rel=1e-12)
    grads = backward(tape)
    assert set(grads) == set(params.tensors)

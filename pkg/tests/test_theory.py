import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from batches import formatted_params
from ltelab.env import ANS, END, EQ, HintSpec, HintVariant, Vocab, generate_task, render_prompt
from ltelab.policy import PolicyShape, SampleConfig, zeros
from ltelab.theory import (
    AnswerDistribution, HintRespectingPolicy, IntractableError, enumerate_answer_distribution,
    information_gain_check, monte_carlo_answer_distribution, prune_distribution, pruning_bound,
    pruning_bound_approx, verify_ratio_exceeds_one,
)


def delta_policy(M=5, answer=3, c=5.0):
    """Reads only the newest token: EQ -> ANS -> digit -> END, each with logit 50."""
    V = Vocab(M).size
    shape = PolicyShape(window=3, embed=V, vocab=V, hidden=V)
    p = zeros(shape)
    E, W1, b1, W2, b2 = p.blocks()
    E[:] = np.eye(V)
    W1[-1] = c * np.eye(V)
    d = Vocab(M).digit(answer)
    W2[EQ, ANS] = W2[ANS, d] = W2[d, END] = 50.0
    return p


def test_delta_policy_is_certain():
    dist = enumerate_answer_distribution(delta_policy(), [12, 9, 13, EQ], 4)
    assert abs(dist.p(3) - 1) < 1e-12
    assert abs(dist.total - 1) < 1e-9


def test_uniform_policy_symmetric():
    shape = PolicyShape(window=3, embed=2, vocab=Vocab(2).size, hidden=3)
    dist = enumerate_answer_distribution(zeros(shape), [12, 9, 13, EQ], 4)
    assert dist.p(0) > 0
    assert abs(dist.p(0) - dist.p(1)) < 1e-9
    assert abs(dist.total - 1) < 1e-9
    assert np.all(dist.probs >= 0) and dist.no_answer >= 0


def test_exact_distribution_by_brute_force_paths():
    """Sum over every response of length <= 3 directly."""
    import itertools
    from ltelab.env import extract_answer
    from ltelab.policy import logprobs
    p = formatted_params()
    V, M = p.shape.vocab, 5
    prompt = generate_task(4, 1, M).prompt_tokens
    L = 3
    probs = np.zeros(M)
    for n in range(1, L + 1):
        for body in itertools.product([t for t in range(V) if t != END], repeat=n - 1):
            for last in range(V):
                resp = list(body) + [last]
                if n < L and last != END:
                    continue
                a = extract_answer(resp, n == L and last != END, M)
                if a is not None:
                    probs[a] += math.exp(logprobs(p, prompt, resp).sum())
    dist = enumerate_answer_distribution(p, prompt, L)
    np.testing.assert_allclose(dist.probs, probs, atol=1e-12)


def test_monte_carlo_agrees_with_exact():
    p = formatted_params()
    prompt = generate_task(2, 1, 5).prompt_tokens
    exact = enumerate_answer_distribution(p, prompt, 4)
    n = 1_000_000
    mc = monte_carlo_answer_distribution(p, prompt, 4, n, seed=9)
    assert mc.provenance == "monte-carlo" and mc.n_samples == n
    for a in range(5):
        sigma = math.sqrt(exact.p(a) * (1 - exact.p(a)) / n)
        assert abs(mc.p(a) - exact.p(a)) <= 3 * sigma
    assert abs(mc.total - 1) < 1e-12


def test_tractability_guard():
    p = formatted_params()
    with pytest.raises(IntractableError):
        enumerate_answer_distribution(p, [12, 9, 13, EQ], 8, max_states=1000)
    with pytest.raises(ValueError):
        enumerate_answer_distribution(p, [12], 0)


def test_distribution_json_round_trip():
    d = AnswerDistribution.from_probs([0.5, 0.25], 0.25)
    back = AnswerDistribution.from_dict(__import__("json").loads(d.to_json()))
    np.testing.assert_array_equal(back.probs, d.probs)
    assert back.no_answer == d.no_answer and back.provenance == "exact"


def test_prune_examples():
    base = AnswerDistribution.from_probs([0.5, 0.3, 0.2])
    np.testing.assert_allclose(prune_distribution(base, [0]).probs, [0, 0.6, 0.4], atol=1e-15)
    assert prune_distribution(base, []) is base
    zero = AnswerDistribution.from_probs([0.0, 0.7, 0.3])
    assert prune_distribution(zero, [0]) is zero
    with pytest.raises(ValueError):
        prune_distribution(base, [0, 1, 2])


def test_ratio_examples():
    base = AnswerDistribution.from_probs([0.5, 0.3, 0.2])
    chk = verify_ratio_exceeds_one(base, prune_distribution(base, [0]), truth=1)
    assert abs(chk.ratio - 2.0) < 1e-12 and chk.exceeds_one
    zero = AnswerDistribution.from_probs([0.0, 0.7, 0.3])
    chk = verify_ratio_exceeds_one(zero, prune_distribution(zero, [0]), truth=1)
    assert chk.ratio == 1.0 and not chk.exceeds_one
    undefined = verify_ratio_exceeds_one(zero, zero, truth=0)
    assert undefined.ratio is None and not undefined.exceeds_one


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=10), st.floats(0, 0.5), st.data())
def test_oracle_ratio_closed_form(weights, no_ans, data):
    w = np.array(weights)
    if w.sum() == 0:
        return
    probs = w / w.sum() * (1 - no_ans)
    truth = data.draw(st.integers(0, len(w) - 1))
    assume(probs[truth] > 1e-9)
    wrong = data.draw(st.lists(st.sampled_from([a for a in range(len(w)) if a != truth]), max_size=len(w) - 1))
    base = AnswerDistribution.from_probs(probs, no_ans)
    pruned_mass = float(sum(probs[a] for a in set(wrong)))
    chk = verify_ratio_exceeds_one(base, prune_distribution(base, wrong), truth)
    assert abs(chk.ratio - 1 / (1 - pruned_mass)) < 1e-9
    assert chk.ratio >= 1.0
    if pruned_mass > 1e-12:  # smaller masses are below double resolution of 1/(1-p)
        assert chk.exceeds_one
    if pruned_mass == 0:
        assert not chk.exceeds_one


def test_hint_respecting_policy_distribution_and_sampler():
    p = formatted_params()
    q = generate_task(2, 1, 5)
    base = enumerate_answer_distribution(p, q.prompt_tokens, 4)
    wrong = (int(np.argmax([x if i != q.truth else -1 for i, x in enumerate(base.probs)])),)
    hinted_prompt = render_prompt(q, HintSpec(HintVariant.HINT, wrong))
    oracle = HintRespectingPolicy(p)
    got = oracle.answer_distribution(hinted_prompt, 4)
    np.testing.assert_allclose(got.probs, prune_distribution(base, wrong).probs, atol=1e-15)
    chk = verify_ratio_exceeds_one(base, got, q.truth)
    assert abs(chk.ratio - 1 / (1 - base.p(wrong[0]))) < 1e-9 and chk.exceeds_one
    rs = oracle([hinted_prompt] * 50, SampleConfig(1.0, 4), np.random.default_rng(0))
    from ltelab.env import extract_answer
    assert all(extract_answer(r.response_tokens, r.truncated, 5) not in wrong for r in rs)
    assert all(r.prompt_used == hinted_prompt for r in rs)


def test_trained_policy_ratio_is_only_reported():
    # observational: a trained policy may or may not satisfy the oracle's guarantee
    p = formatted_params()
    q = generate_task(2, 1, 5)
    base = enumerate_answer_distribution(p, q.prompt_tokens, 4)
    hinted = enumerate_answer_distribution(p, render_prompt(q, HintSpec(HintVariant.HINT, ((q.truth + 1) % 5,))), 4)
    chk = verify_ratio_exceeds_one(base, hinted, q.truth)
    assert chk.ratio is not None and chk.ratio > 0


def test_pruning_bound_reference_point():
    direct = 1 + 0.1 / (1 - 0.5 ** (1 / 8))
    assert abs(pruning_bound(1, 0.1, 0.5, 8) - direct) < 1e-9
    assert abs(pruning_bound(1, 0.1, 0.5, 8) - 2.2054) < 1e-3
    assert abs(0.5 ** 0.125 - 0.917004) < 1e-6


def test_pruning_bound_delta_zero_and_domain():
    assert pruning_bound(1.7, 0.0, 0.3, 5) == 1.7
    for args in [(0, 0.1, 0.5, 8), (1, -0.1, 0.5, 8), (1, 0.1, 0.0, 8), (1, 0.1, 1.0, 8), (1, 0.1, 0.5, 0),
                 (1, 0.1, 0.5, 2.5)]:
        with pytest.raises(ValueError):
            pruning_bound(*args)


@pytest.mark.parametrize("n", [16, 32, 64, 128])
@pytest.mark.parametrize("delta", [0.01, 0.1, 0.5])
def test_pruning_bound_first_order_form(n, delta):
    exact = pruning_bound(1.0, delta, 0.5, n)
    assert abs(pruning_bound_approx(1.0, delta, 0.5, n) - exact) / exact < 0.05


@settings(max_examples=1000, deadline=None)
@given(st.floats(0.01, 10), st.one_of(st.just(0.0), st.floats(1e-6, 5)), st.floats(0.01, 0.99), st.integers(1, 200),
       st.floats(1e-3, 1), st.floats(1e-3, 0.5), st.integers(1, 20))
def test_pruning_bound_monotone(alpha, delta, tau, n, dd, dt, dn):
    b = pruning_bound(alpha, delta, tau, n)
    assert pruning_bound(alpha, delta + dd, tau, n) > b
    t2 = min(tau + dt, 0.999)
    if t2 > tau:
        assert pruning_bound(alpha, delta, t2, n) >= b
        if delta > 0:
            assert pruning_bound(alpha, delta, t2, n) > b
    if delta > 0:
        assert pruning_bound(alpha, delta, tau, n + dn) > b


def _random_joint(rng, shape):
    p = rng.random(shape) ** 3
    p[rng.random(shape) < 0.2] = 0
    if p.sum() == 0:
        p.flat[0] = 1
    return p / p.sum()


def test_information_gain_independent_hint():
    rng = np.random.default_rng(0)
    pxd = _random_joint(rng, (3, 4))
    ph = np.array([0.2, 0.8])
    ig = information_gain_check(pxd[:, :, None] * ph[None, None, :])
    assert abs(ig.conditional) < 1e-12
    assert abs(ig.joint - ig.data) < 1e-12


def test_information_gain_copy_hint():
    rng = np.random.default_rng(1)
    pxd = _random_joint(rng, (2, 2))
    joint = np.zeros((2, 2, 2))
    for x in range(2):
        joint[x, :, x] = pxd[x]
    ig = information_gain_check(joint)
    pd = pxd.sum(axis=0)
    h_x_given_d = -sum(pxd[x, d] * math.log(pxd[x, d] / pd[d]) for x in range(2) for d in range(2) if pxd[x, d] > 0)
    assert abs(ig.conditional - h_x_given_d) < 1e-12


def test_information_gain_rejects_bad_tables():
    with pytest.raises(ValueError):
        information_gain_check(np.ones((2, 2)) / 4)
    with pytest.raises(ValueError):
        information_gain_check(np.full((2, 2, 2), 0.2))
    bad = np.full((2, 2, 2), 1 / 8)
    bad[0, 0, 0] = -1 / 8
    bad[1, 1, 1] = 3 / 8
    with pytest.raises(ValueError):
        information_gain_check(bad)


def test_information_gain_chain_rule_random():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
        ig = information_gain_check(_random_joint(rng, shape))
        assert abs(ig.joint - ig.data - ig.conditional) < 1e-9
        assert ig.conditional >= -1e-12

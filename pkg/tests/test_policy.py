import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merl_maze.env import DOWN, UP, generate_maze, make_context
from merl_maze.policy import BASE_POLICY, N_STATES, Policy, length_choices

from conftest import all_sequences, central_diff, rel_err

FIXTURE = Policy(base_scale=0.1, positional=True)
POLICIES = [BASE_POLICY, FIXTURE]


def ctx_for(seed, n=5, k=4):
    return make_context("c", generate_maze(seed, n, k))


def random_theta(policy, seed, scale=1.0):
    return np.random.default_rng(seed).normal(scale=scale, size=policy.dim)


def test_dimensions():
    assert BASE_POLICY.dim == 36
    assert FIXTURE.dim == 36 + 4 * 16 * 16 * N_STATES


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2000), t=st.integers(0, 12), prev=st.integers(-1, 3))
def test_step_feature_structure(seed, t, prev):
    ctx = ctx_for(seed)
    prefix = [] if prev < 0 else [0] * max(t - 1, 0) + [prev]
    t = len(prefix)
    rows = BASE_POLICY.step_features(ctx, prefix)
    assert rows.shape == (4, 36)
    for c in range(4):
        assert rows[c, :16].sum() == 1
        assert rows[c, 16:32].sum() == (0 if t == 0 else 1)
        assert rows[c, 32:].sum() == 1 and rows[c, 32 + c] == 1
    theta = random_theta(BASE_POLICY, seed)
    np.testing.assert_allclose(BASE_POLICY.step_logits(theta, ctx, prefix), rows @ theta, atol=1e-12)


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
def test_zero_theta_is_uniform(policy, example_ctx):
    z = policy.step_logits(policy.init_params(), example_ctx, [UP, DOWN])
    assert np.all(z == 0)
    assert policy.log_prob(policy.init_params(), example_ctx, (0, 1, 2, 3)) == pytest.approx(4 * np.log(0.25))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), data=st.data())
def test_logits_depend_on_last_action_and_length_only(seed, data):
    ctx = ctx_for(seed)
    theta = random_theta(FIXTURE, seed)
    n = data.draw(st.integers(1, 6))
    p1 = data.draw(st.lists(st.integers(0, 3), min_size=n - 1, max_size=n - 1))
    p2 = data.draw(st.lists(st.integers(0, 3), min_size=n - 1, max_size=n - 1))
    last = data.draw(st.integers(0, 3))
    np.testing.assert_array_equal(
        FIXTURE.step_logits(theta, ctx, p1 + [last]), FIXTURE.step_logits(theta, ctx, p2 + [last])
    )


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_probabilities_normalise_over_fixed_length(policy, T):
    ctx = ctx_for(T)
    theta = random_theta(policy, T)
    seqs = all_sequences(T)
    lp = policy.log_probs(theta, policy.batch([(ctx, a) for a in seqs]))
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)
    for a in seqs[:: max(1, len(seqs) // 8)]:
        assert policy.log_prob(theta, ctx, a) == pytest.approx(lp[seqs.index(a)], abs=1e-12)


def test_bias_monotonicity(example_ctx):
    theta = random_theta(BASE_POLICY, 0)
    for c in range(4):
        up = theta.copy()
        up[32 + c] += 0.5
        a = (c,) * 4
        assert BASE_POLICY.log_prob(up, example_ctx, a) > BASE_POLICY.log_prob(theta, example_ctx, a)


def test_grad_log_prob_finite_differences_base():
    rng = np.random.default_rng(0)
    for i in range(20):
        ctx = ctx_for(i)
        theta = rng.normal(size=36)
        a = tuple(rng.integers(0, 4, size=rng.integers(1, ctx.max_steps + 1)))
        num = central_diff(lambda th: BASE_POLICY.log_prob(th, ctx, a), theta)[0]
        assert rel_err(BASE_POLICY.grad_log_prob(theta, ctx, a), num) <= 1e-6


def test_grad_log_prob_directional_positional():
    rng = np.random.default_rng(1)
    for i in range(20):
        ctx = ctx_for(i)
        theta = rng.normal(size=FIXTURE.dim)
        a = tuple(rng.integers(0, 4, size=rng.integers(1, ctx.max_steps + 1)))
        g = FIXTURE.grad_log_prob(theta, ctx, a)
        # probe the coordinates the trajectory touches plus a random direction
        v = rng.normal(size=FIXTURE.dim) * (np.abs(g) > 0) + rng.normal(size=FIXTURE.dim) * 1e-3
        num = central_diff(lambda s: FIXTURE.log_prob(theta + s[0] * v, ctx, a), np.zeros(1))[0, 0]
        assert g @ v == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_grad_closed_form_at_zero(example_ctx):
    g = BASE_POLICY.grad_log_prob(np.zeros(36), example_ctx, (UP,))
    rows = BASE_POLICY.step_features(example_ctx, [])
    np.testing.assert_allclose(g, rows[UP] - rows.mean(axis=0), atol=1e-15)


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
@pytest.mark.parametrize("T", [1, 2, 3])
def test_score_function_identity(policy, T):
    ctx = ctx_for(10 + T)
    theta = random_theta(policy, T)
    sb = policy.batch([(ctx, a) for a in all_sequences(T)])
    p = np.exp(policy.log_probs(theta, sb))
    assert np.abs(policy.weighted_score(theta, sb, p)).max() <= 1e-9


def test_batched_scores_agree(example_ctx):
    theta = random_theta(FIXTURE, 4)
    trajs = [(0, 1, 2), (3,), (3, 3, 0, 0, 1, 2)]
    sb = FIXTURE.batch([(example_ctx, a) for a in trajs])
    S = np.stack([FIXTURE.grad_log_prob(theta, example_ctx, a) for a in trajs])
    np.testing.assert_allclose(FIXTURE.scores(theta, sb), S, atol=1e-12)
    w = np.array([0.2, -1.0, 3.0])
    np.testing.assert_allclose(FIXTURE.weighted_score(theta, sb, w), w @ S, atol=1e-12)
    g = np.random.default_rng(0).normal(size=FIXTURE.dim)
    np.testing.assert_allclose(FIXTURE.score_dot(theta, sb, g), S @ g, atol=1e-9)


def test_uniform_single_step_sampling(example_ctx):
    n = 10_000
    out = BASE_POLICY.sample_batch(np.zeros(36), [example_ctx], n, np.random.default_rng(0), lengths=[[1]], halt=False)[0]
    counts = np.bincount([a[0] for a in out], minlength=4)
    sd = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) <= 3 * sd)


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
def test_gold_encoding_samples_gold(policy):
    ctx = ctx_for(3, 7, 14)
    theta = policy.gold_encoding(10.0)
    out = policy.sample_batch(theta, [ctx], 1000, np.random.default_rng(1), lengths=[[len(ctx.gold)]], halt=False)[0]
    assert np.mean([a == ctx.gold for a in out]) >= 0.99


def test_sampling_is_deterministic_per_seed(example_ctx):
    theta = random_theta(FIXTURE, 5)
    a = FIXTURE.sample(theta, example_ctx, np.random.default_rng(42))
    assert a == FIXTURE.sample(theta, example_ctx, np.random.default_rng(42))
    out = FIXTURE.sample_batch(theta, [example_ctx], 200, np.random.default_rng(3))[0]
    assert {len(t) for t in out} <= set(range(1, example_ctx.max_steps + 1))


def test_length_choices(example_ctx):
    np.testing.assert_array_equal(length_choices(example_ctx), [3, 4, 5, 6])
    short = make_context("s", generate_maze(0, 3, 0))
    assert length_choices(short).min() >= 1 and length_choices(short).max() <= short.max_steps


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
def test_greedy_zero_theta_is_all_up(policy, example_ctx):
    assert policy.greedy_decode(policy.init_params(), example_ctx, interactive=False) == (UP,) * 4


@pytest.mark.parametrize("policy", POLICIES, ids=["base", "positional"])
def test_gold_encoding_decodes_gold(policy):
    for seed in range(50):
        ctx = ctx_for(seed, 7, 14)
        theta = policy.gold_encoding(10.0)
        assert policy.greedy_decode(theta, ctx, interactive=False) == ctx.gold
        assert policy.greedy_decode(theta, ctx) == ctx.gold


def test_interactive_greedy_halts_at_goal_or_budget(example_ctx):
    # all-Up from (2,2) walks into the trap at (0,2)
    assert BASE_POLICY.greedy_decode(np.zeros(36), example_ctx) == (UP, UP)
    # all-Down bumps the bottom wall until the budget runs out
    theta = np.zeros(36)
    theta[32 + DOWN] = 1.0
    assert BASE_POLICY.greedy_decode(theta, example_ctx) == (DOWN,) * example_ctx.max_steps


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_greedy_last_action_is_locally_optimal(seed):
    ctx = ctx_for(seed)
    theta = random_theta(BASE_POLICY, seed)
    a = BASE_POLICY.greedy_decode(theta, ctx, interactive=False)
    best = BASE_POLICY.log_prob(theta, ctx, a)
    for c in range(4):
        assert best >= BASE_POLICY.log_prob(theta, ctx, a[:-1] + (c,)) - 1e-12


def test_greedy_is_not_locally_optimal_in_general(example_ctx):
    # a slightly preferred first action leads to a flat second step, while
    # the runner-up makes the second step near-certain
    theta = np.zeros(36)
    theta[32 + UP] = 0.1
    theta[16 + 4 * DOWN + UP] = 10.0
    greedy = BASE_POLICY.greedy_decode(theta, example_ctx, interactive=False)
    assert greedy[:2] == (UP, UP)
    alt = (DOWN,) + greedy[1:]
    assert BASE_POLICY.log_prob(theta, example_ctx, alt) > BASE_POLICY.log_prob(theta, example_ctx, greedy)

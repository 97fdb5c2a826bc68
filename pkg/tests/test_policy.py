import math

import numpy as np
import pytest

from epolab.core import Batch, Observation
from epolab.env import ChainLock
from epolab.policy import (
    Contexts,
    FeatureMap,
    FeatureMapMismatch,
    PolicyParams,
    ValueBaseline,
    act,
    backprop,
    compute_logits,
    evaluate_tokens,
    init_params,
    log_softmax,
    logprob_entropy_grads,
    param_count,
    value_estimate,
    value_update,
)
from epolab.trainer import feature_map_for, rollout

from conftest import random_params, sample_batch

SCORERS = ["tabular", "mlp"]


def _fd(f, w, h=1e-5):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


class TestFeatureMap:
    def test_exact_prefix_buckets_distinct(self):
        fm = FeatureMap(2, 3, 3, 3)
        prefixes = [(), (0,), (1,), (2,)] + [(a, b) for a in range(3) for b in range(3)]
        assert fm.n_buckets == 13
        assert sorted(fm.bucket(p) for p in prefixes) == list(range(13))

    def test_hashed_buckets(self):
        fm = FeatureMap(2, 3, 3, 3, n_buckets=4)
        assert all(0 <= fm.bucket(p) < 4 for p in [(), (2,), (2, 2)])

    def test_vocab_bounds(self):
        with pytest.raises(ValueError):
            FeatureMap(1, 2, 1, 1)

    def test_param_count(self):
        fm = FeatureMap(4, 6, 8, 1)
        assert param_count(fm, "tabular") == 4 * 6 * 1 * 8
        assert param_count(fm, "mlp", 5) == 5 * (4 + 6 + 1) + 5 + 8 * 5 + 8


class TestParams:
    def test_rejects_bad_shape(self):
        fm = FeatureMap(2, 2, 3, 1)
        with pytest.raises(ValueError):
            PolicyParams("tabular", np.zeros(5), fm)

    def test_rejects_nonfinite(self):
        fm = FeatureMap(2, 2, 3, 1)
        w = np.zeros(param_count(fm, "tabular"))
        w[0] = np.nan
        with pytest.raises(ValueError):
            PolicyParams("tabular", w, fm)

    def test_hidden_width_cap(self):
        with pytest.raises(ValueError):
            init_params(FeatureMap(2, 2, 3, 1), "mlp", hidden=33)


class TestAct:
    def test_zero_weights_uniform(self):
        env = ChainLock(vocab_size=8, tokens_per_turn=3)
        params = init_params(feature_map_for(env), "tabular")
        turn = act(params, env.reset(0), 0, np.random.default_rng(0), env.decode)
        assert len(turn.steps) == 3
        for s in turn.steps:
            np.testing.assert_allclose(s.probs, 1 / 8, atol=1e-15)
            assert s.entropy == pytest.approx(math.log(8), abs=1e-12)

    @pytest.mark.parametrize("kind", SCORERS)
    def test_same_seed_same_turn(self, small_env, kind):
        params = random_params(small_env, kind, 0)
        obs = small_env.reset(0)
        a = act(params, obs, 0, np.random.default_rng(5), small_env.decode)
        b = act(params, obs, 0, np.random.default_rng(5), small_env.decode)
        assert a.tokens == b.tokens
        assert [s.logprob for s in a.steps] == [s.logprob for s in b.steps]

    def test_strong_token_frequency(self):
        fm = FeatureMap(1, 2, 5, 1)
        w = np.zeros(param_count(fm, "tabular")).reshape(-1, 5)
        w[:, 3] = 8.0  # p(3) = e^8 / (e^8 + 4) ~ 0.99866
        params = PolicyParams("tabular", w.ravel(), fm)
        obs = Observation(0, 0, 0)
        rng = np.random.default_rng(0)
        hits = sum(act(params, obs, 0, rng, lambda t: 0).tokens[0] == 3 for _ in range(10_000))
        assert hits / 10_000 > 0.99

    def test_greedy_takes_argmax(self):
        fm = FeatureMap(1, 2, 4, 2)
        w = np.zeros(param_count(fm, "tabular")).reshape(-1, 4)
        w[:, 2] = 0.1
        params = PolicyParams("tabular", w.ravel(), fm)
        turn = act(params, Observation(0, 0, 0), 0, np.random.default_rng(0), lambda t: 0, greedy=True)
        assert turn.tokens == (2, 2)

    @pytest.mark.parametrize("kind", SCORERS)
    def test_recorded_logprob_matches_recompute(self, small_env, kind):
        params = random_params(small_env, kind, 1, scale=1.5)
        batch = sample_batch(small_env, params, 2, n=6)
        view = evaluate_tokens(params, batch)
        np.testing.assert_allclose(view.logp, view.logp_old, rtol=0, atol=1e-12)
        np.testing.assert_allclose(view.entropy, view.entropy_old, rtol=0, atol=1e-12)


class TestGradients:
    def test_tabular_one_hot_identity(self, small_env):
        params = random_params(small_env, "tabular", 2)
        traj = sample_batch(small_env, params, 0, n=1).trajectories[0]
        fm = params.feature_map
        out = logprob_entropy_grads(params, traj)
        view = evaluate_tokens(params, Batch((traj,)))
        for n, (_, _, g_lp, _) in enumerate(out):
            expect = np.zeros((fm.n_contexts, fm.vocab_size))
            c = fm.context_index(view.ctx.tag[n], view.ctx.turn[n], view.ctx.bucket[n])
            e_k = np.eye(fm.vocab_size)[view.chosen[n]]
            expect[c] = e_k - view.probs[n]
            np.testing.assert_allclose(g_lp, expect.ravel(), atol=1e-15)

    def test_entropy_gradient_zero_at_uniform(self, small_env):
        params = init_params(feature_map_for(small_env), "tabular")
        traj = sample_batch(small_env, params, 0, n=1).trajectories[0]
        for _, h, _, g_h in logprob_entropy_grads(params, traj):
            assert h == pytest.approx(math.log(small_env.spec.vocab_size))
            np.testing.assert_allclose(g_h, 0.0, atol=1e-15)

    @pytest.mark.parametrize("kind", SCORERS)
    @pytest.mark.parametrize("draw", range(10))
    def test_finite_difference(self, kind, draw):
        env = ChainLock(horizon=3, vocab_size=4, tokens_per_turn=2, n_commands=2, n_variants=4)
        params = random_params(env, kind, 100 + draw, scale=0.8, hidden=4)
        traj = sample_batch(env, params, draw, n=1).trajectories[0]
        analytic = logprob_entropy_grads(params, traj)
        fm = params.feature_map
        view0 = evaluate_tokens(params, Batch((traj,)))
        for n in range(len(analytic)):
            one = Contexts(view0.ctx.tag[n : n + 1], view0.ctx.turn[n : n + 1], view0.ctx.bucket[n : n + 1])
            k = view0.chosen[n]

            def lp(w):
                return log_softmax(compute_logits(params.with_weights(w), one))[0, k]

            def ent(w):
                z = log_softmax(compute_logits(params.with_weights(w), one))[0]
                return -np.sum(np.exp(z) * z)

            assert _rel(analytic[n][2], _fd(lp, params.weights)) <= 1e-6
            assert _rel(analytic[n][3], _fd(ent, params.weights)) <= 1e-6
        assert fm.vocab_size == 4

    @pytest.mark.parametrize("kind", SCORERS)
    def test_score_function_zero_mean(self, small_env, kind):
        params = random_params(small_env, kind, 3, scale=1.0)
        obs = small_env.reset(1)
        ctx = Contexts(np.array([obs.feature_tag]), np.array([0]), np.array([0]))
        probs = np.exp(log_softmax(compute_logits(params, ctx)))[0]
        total = np.zeros(params.weights.size)
        for v in range(len(probs)):
            g = -probs.copy()
            g[v] += 1.0
            total += probs[v] * backprop(params, ctx, g[None, :])
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(total, 0.0, atol=1e-12)

    def test_feature_map_mismatch(self, small_env):
        params = random_params(small_env, "tabular", 0)
        traj = sample_batch(small_env, params, 0, n=1).trajectories[0]
        other = init_params(feature_map_for(ChainLock(horizon=4, vocab_size=5, tokens_per_turn=2, n_commands=3)))
        with pytest.raises(FeatureMapMismatch):
            logprob_entropy_grads(other, traj)


class TestValueBaseline:
    def _batch(self, env, n=4, seed=0):
        params = init_params(feature_map_for(env))
        return sample_batch(env, params, seed, n=n)

    def test_fresh_is_zero(self):
        vb = ValueBaseline.zeros(10, 4, 0.5)
        assert value_estimate(vb, Observation(3, 1, 0), 1) == 0.0

    def test_unseen_cell(self):
        vb = ValueBaseline(np.ones((2, 2)), 0.5)
        assert value_estimate(vb, Observation(7, 0, 0), 0) == 0.0
        assert value_estimate(vb, Observation(1, 0, 0), 5) == 0.0

    def test_zero_lr_unchanged(self):
        env = ChainLock()
        vb = ValueBaseline.zeros(env.n_states, env.horizon, 0.0)
        new = value_update(vb, self._batch(env), [1, 0, 1, 1])
        np.testing.assert_array_equal(new.table, vb.table)

    def test_full_step_fit(self):
        env = ChainLock()
        b = self._batch(env, n=1)
        vb = value_update(ValueBaseline.zeros(env.n_states, env.horizon, 1.0), b, [1])
        obs = b.trajectories[0].turns[0].observation
        assert value_estimate(vb, obs, 0) == 1.0

    def test_constant_return_monotone(self):
        env = ChainLock()
        b = self._batch(env, n=2)
        vb = ValueBaseline.zeros(env.n_states, env.horizon, 0.3)
        obs = b.trajectories[0].turns[0].observation
        prev = 0.0
        for _ in range(20):
            vb = value_update(vb, b, [1, 1])
            cur = value_estimate(vb, obs, 0)
            assert prev < cur <= 1.0
            prev = cur
        assert cur == pytest.approx(1 - 0.7**20)

    def test_mixed_batch_oracle(self):
        env = ChainLock()
        b = self._batch(env, n=8, seed=4)
        returns = [1, 0, 0, 1, 1, 0, 1, 0]
        lr = 0.25
        init = np.random.default_rng(0).uniform(0, 1, (env.n_states, env.horizon))
        new = value_update(ValueBaseline(init, lr), b, returns)
        expect = init.copy()
        for s in range(env.n_states):
            for t in range(env.horizon):
                hits = [g for g, tr in zip(returns, b.trajectories) for u in tr.turns
                        if (u.observation.state_id, u.observation.turn_index) == (s, t)]
                if hits:
                    expect[s, t] = init[s, t] + lr * (sum(hits) / len(hits) - init[s, t])
        np.testing.assert_allclose(new.table, expect, atol=1e-15)

    def test_misaligned(self):
        env = ChainLock()
        with pytest.raises(ValueError):
            value_update(ValueBaseline.zeros(env.n_states, env.horizon, 0.5), self._batch(env), [1])

import json
import math

import numpy as np
import pytest

from epolab import trainer
from epolab.core import Batch, batch_mean_entropy
from epolab.env import ChainLock
from epolab.losses import EpoConfig, epo_loss
from epolab.policy import PolicyParams, init_params
from epolab.trainer import (
    MetricsRecord,
    NonFiniteLossError,
    PolicyConfig,
    TrainerConfig,
    collect_batch,
    compute_advantages,
    early_late_entropy,
    evaluate,
    feature_map_for,
    init_run,
    load_checkpoint,
    read_metrics,
    run_training,
    save_checkpoint,
    summarize_run,
    train_step,
)

from conftest import traj_from_entropies

FAST = TrainerConfig(step_size=1.0, eval_every=5)


def oracle_params(env: ChainLock, margin: float = 20.0) -> PolicyParams:
    """Tabular weights that decode the cue in the observation tag (one token per turn)."""
    fm = feature_map_for(env)
    w = np.zeros((fm.n_contexts, fm.vocab_size))
    c = env.n_commands
    for tag in range(c):
        for t in range(env.horizon):
            cmd = (tag - env.cue_key[t]) % c
            w[fm.context_index(tag, t, 0), cmd] = margin
    return PolicyParams("tabular", w.ravel(), fm)


def fingerprint(batch):
    return [
        (t.task_id, t.terminal_reward, [(u.tokens, tuple(s.logprob for s in u.steps)) for u in t.turns])
        for t in batch.trajectories
    ]


@pytest.fixture
def env():
    return ChainLock(horizon=4, vocab_size=4, n_commands=2, n_variants=8)


class TestCollectBatch:
    def test_deterministic(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=3)
        assert fingerprint(collect_batch(state, env, 1)) == fingerprint(collect_batch(state, env, 1))

    def test_grpo_grouping(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        batch = collect_batch(state, env, 8, group_size=4)
        tasks = [t.task_id for t in batch.trajectories]
        assert len(set(tasks[:4])) == 1 and len(set(tasks[4:])) == 1
        assert set(tasks) <= set(env.task_ids("iid"))

    def test_lengths_within_horizon(self, env):
        state = init_run(env, PolicyConfig(init_scale=1.0), seed=1)
        batch = collect_batch(state, env, 16)
        assert all(1 <= t.horizon <= env.horizon for t in batch.trajectories)

    def test_streams_differ_by_step(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        a = collect_batch(state, env, 8)
        state.k = 1
        b = collect_batch(state, env, 8)
        assert fingerprint(a) != fingerprint(b)

    def test_bad_sizes(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        with pytest.raises(ValueError):
            collect_batch(state, env, 0)
        with pytest.raises(ValueError):
            collect_batch(state, env, 6, group_size=4)


class TestTrainStep:
    def test_first_step_has_no_smoothing(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=0)
        _, report = train_step(state, env, EpoConfig(lam=0.1, K=5, batch_size=4), FAST)
        assert report.l_smooth == 0.0

    def test_first_step_variants_agree(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=0)
        reports = [
            train_step(state, env, EpoConfig(variant=v, lam=0.1, K=5, batch_size=4), FAST)[1]
            for v in ("epo", "epo_base")
        ]
        assert reports[0].l_epo == reports[1].l_epo
        np.testing.assert_array_equal(reports[0].grad, reports[1].grad)
        assert reports[0].l_epo == pytest.approx(reports[0].l_mt - 0.1 * reports[0].l_h, abs=1e-15)

    def test_regularizers_off_is_ppo(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=0)
        state, _ = train_step(state, env, EpoConfig(variant="ppo", K=5, batch_size=4), FAST)
        a = train_step(state, env, EpoConfig(variant="ppo", K=5, batch_size=4), FAST)[0]
        b = train_step(state, env, EpoConfig(variant="epo", lam=0.0, alpha=0.0, K=5, batch_size=4), FAST)[0]
        np.testing.assert_array_equal(a.params.weights, b.params.weights)

    def test_ppo_report_has_no_entropy_contribution(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=0)
        _, rep = train_step(state, env, EpoConfig(variant="ppo", lam=0.5, K=5, batch_size=4), FAST)
        assert rep.lam == 0.0 and rep.l_smooth == 0.0 and rep.l_epo == rep.l_mt

    def test_gradient_descent_update(self, env):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=0)
        cfg = EpoConfig(lam=0.1, K=5, batch_size=4)
        tcfg = TrainerConfig(step_size=0.3)
        new, rep = train_step(state, env, cfg, tcfg)
        np.testing.assert_array_equal(new.params.weights, state.params.weights - 0.3 * rep.grad)
        batch = collect_batch(state, env, 4)
        rep2 = epo_loss(batch, compute_advantages(state, batch, cfg), state.window, 0, cfg, state.params)
        assert rep2.l_epo == rep.l_epo

    @pytest.mark.parametrize("capacity", [None, 3])
    def test_window_discipline(self, env, capacity):
        state = init_run(env, PolicyConfig(init_scale=0.5), seed=2, window_capacity=capacity)
        cfg = EpoConfig(lam=0.1, K=6, batch_size=4)
        for k in range(6):
            batch = collect_batch(state, env, 4)
            state, _ = train_step(state, env, cfg, FAST)
            expect = k + 1 if capacity is None else min(k + 1, capacity)
            assert len(state.window) == expect
            assert state.window.history[-1] == batch_mean_entropy(batch)
            assert state.metrics[-1].batch_entropy == state.window.history[-1]

    def test_eval_cadence(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        cfg = EpoConfig(K=7, batch_size=2)
        for _ in range(7):
            state, _ = train_step(state, env, cfg, FAST)
        has_eval = [m.iid_success is not None for m in state.metrics]
        assert has_eval == [False, False, False, False, True, False, True]

    def test_finished_run(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        state.k = 5
        with pytest.raises(ValueError):
            train_step(state, env, EpoConfig(K=5), FAST)

    def test_non_finite_loss_aborts(self, env, monkeypatch):
        state = init_run(env, PolicyConfig(), seed=0)
        real = trainer.epo_loss

        def broken(*args, **kwargs):
            rep = real(*args, **kwargs)
            rep.l_epo = float("nan")
            return rep

        monkeypatch.setattr(trainer, "epo_loss", broken)
        with pytest.raises(NonFiniteLossError) as err:
            train_step(state, env, EpoConfig(K=5, batch_size=2), FAST)
        assert err.value.record["k"] == 0


class TestEvaluate:
    def test_uniform_policy_never_succeeds(self):
        env = ChainLock(horizon=4, vocab_size=8, tokens_per_turn=4, n_commands=2, decode="exact")
        params = init_params(feature_map_for(env))
        # exact success probability per episode
        p = (1 / 8**4) ** 4
        assert p < 1e-14
        assert evaluate(params, env, "iid", episodes=100, greedy=False) == 0.0

    def test_oracle_policy(self):
        env = ChainLock(horizon=6, vocab_size=8)
        params = oracle_params(env)
        assert evaluate(params, env, "iid") == 1.0
        assert evaluate(params, env, "ood") == 1.0

    def test_greedy_repeatable(self, env):
        params = init_params(feature_map_for(env), scale=1.0, rng=np.random.default_rng(0))
        assert evaluate(params, env, "ood", 20) == evaluate(params, env, "ood", 20)

    def test_empty_split(self, env):
        params = init_params(feature_map_for(env))
        with pytest.raises(ValueError):
            evaluate(params, env.restricted("iid"), "ood")


class TestSummarizeRun:
    def test_hand_example(self):
        assert summarize_run([0.2, 0.8, 0.6, 0.6], 0.5) == (0.8, 0.6)

    def test_constant(self):
        best, mean = summarize_run([0.4] * 7)
        assert best == mean == 0.4

    def test_single(self):
        assert summarize_run([0.3], 0.25) == (0.3, 0.3)

    def test_skips_records_without_eval(self):
        recs = [{"iid_success": None}, {"iid_success": 0.5}, {"iid_success": 1.0, "ood_success": 0.0}]
        assert summarize_run(recs, 0.5) == (1.0, 1.0)
        assert summarize_run(recs, 1.0, "ood") == (0.0, 0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            summarize_run([])

    def test_tail_rounds_up(self):
        # 10 evaluations, a quarter of them is 2.5, so the last 3 count
        rates = [0.0] * 7 + [0.3, 0.6, 0.9]
        assert summarize_run(rates, 0.25)[1] == pytest.approx(0.6)


class TestEarlyLateEntropy:
    def test_uniform(self, env):
        state = init_run(env, PolicyConfig(), seed=0)
        batch = collect_batch(state, env, 4)
        early, late = early_late_entropy(batch, 2)
        assert early == pytest.approx(math.log(4)) and late == pytest.approx(math.log(4))

    def test_decreasing(self):
        turns = [[3.0 - 0.1 * (3 * t + i) for i in range(3)] for t in range(8)]
        early, late = early_late_entropy(Batch((traj_from_entropies(turns),)), 10)
        flat = [x for row in turns for x in row]
        assert early == pytest.approx(sum(flat[:10]) / 10)
        assert late == pytest.approx(sum(flat[-10:]) / 10)
        assert early > late

    def test_short_episode_truncates(self):
        tr = traj_from_entropies([[1.0, 2.0], [0.0]])
        assert early_late_entropy(Batch((tr,)), 50) == (1.0, 1.0)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            early_late_entropy(Batch((traj_from_entropies([[1.0]]),)), 0)


class TestRunTraining:
    CFG = EpoConfig(lam=0.05, K=12, batch_size=4, kappa_r=1.0)

    def test_bit_identical_reruns(self, env, tmp_path):
        run_training(env, self.CFG, FAST, PolicyConfig(), 7, tmp_path / "a")
        run_training(env, self.CFG, FAST, PolicyConfig(), 7, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        assert len(a.splitlines()) == 12

    def test_seed_changes_stream(self, env, tmp_path):
        a = run_training(env, self.CFG, FAST, PolicyConfig(), 1)
        b = run_training(env, self.CFG, FAST, PolicyConfig(), 2)
        assert [m.batch_entropy for m in a.metrics] != [m.batch_entropy for m in b.metrics]

    def test_wall_clock_only_in_timing(self, env, tmp_path):
        run_training(env, self.CFG, FAST, PolicyConfig(), 0, tmp_path)
        rec = read_metrics(tmp_path / "metrics.jsonl")[0]
        assert "wall_clock" not in rec
        timing = [json.loads(x) for x in (tmp_path / "timing.jsonl").read_text().splitlines()]
        assert [t["k"] for t in timing] == list(range(12))

    def test_resume_matches_uninterrupted(self, env, tmp_path, monkeypatch):
        tcfg = TrainerConfig(eval_every=5, checkpoint_every=4)
        run_training(env, self.CFG, tcfg, PolicyConfig(scorer="mlp", hidden=4, init_scale=0.3), 5, tmp_path / "full")

        real = trainer.train_step

        def crash_at_seven(state, *args, **kwargs):
            if state.k == 7:
                raise KeyboardInterrupt
            return real(state, *args, **kwargs)

        monkeypatch.setattr(trainer, "train_step", crash_at_seven)
        pcfg = PolicyConfig(scorer="mlp", hidden=4, init_scale=0.3)
        with pytest.raises(KeyboardInterrupt):
            run_training(env, self.CFG, tcfg, pcfg, 5, tmp_path / "cut")
        monkeypatch.setattr(trainer, "train_step", real)
        assert load_checkpoint(tmp_path / "cut" / "checkpoint.json").k == 4
        state = run_training(env, self.CFG, tcfg, pcfg, 5, tmp_path / "cut", resume=True)
        assert state.k == 12
        assert (tmp_path / "cut" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()

    def test_checkpoint_round_trip(self, env, tmp_path):
        state = run_training(env, self.CFG, FAST, PolicyConfig(init_scale=0.2), 3)
        save_checkpoint(state, tmp_path / "c.json")
        back = load_checkpoint(tmp_path / "c.json")
        np.testing.assert_array_equal(back.params.weights, state.params.weights)
        np.testing.assert_array_equal(back.baseline.table, state.baseline.table)
        assert back.window == state.window and back.k == state.k and back.rng_root == state.rng_root

    def test_metrics_record_fields(self, env):
        state = run_training(env, self.CFG, FAST, PolicyConfig(), 0)
        for m in state.metrics:
            assert isinstance(m, MetricsRecord)
            for rate in (m.iid_success, m.ood_success):
                assert rate is None or 0.0 <= rate <= 1.0

    def test_trainer_config_validation(self):
        with pytest.raises(ValueError):
            TrainerConfig(step_size=0)
        with pytest.raises(ValueError):
            TrainerConfig(tail_fraction=0)

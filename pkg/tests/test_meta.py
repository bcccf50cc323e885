from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from metahrl.ddpg import DDPGConfig, actor_loss_and_grad, critic_loss_and_grad
from metahrl.env import TaskSpec, sample_tasks
from metahrl.errors import ConfigError, DomainError
from metahrl.hrl import LEVELS, HRLAgent, HRLConfig, train_hrl
from metahrl.meta import (
    MetaConfig,
    MetaLog,
    MetaModel,
    WeightState,
    evaluate,
    inner_adapt,
    meta_adapt,
    meta_train,
    meta_update,
    query_grads,
    run_baseline,
    softmin_weights,
    support_loss,
    td_variance,
    uniform_weights,
    worker_count,
)
from metahrl.nn import Gradients

TINY = MetaConfig(
    hrl=HRLConfig(ddpg=DDPGConfig(hidden=(8, 8), batch_size=16, actor_lr=1e-4, critic_lr=1e-3)),
    iterations=4,
    eval_episodes=2,
    episode_len=5,
    inner_steps=2,
    adapt_updates=2,
    eval_rollouts=1,
    buffer_capacity=500,
)


def tiny_tasks(n=2, seed=0):
    return sample_tasks(n, TaskSpec(ue_count=4, rb_count=8, seed=seed), np.random.default_rng(seed))


def flat_params(params):
    return {k: p.flat().copy() for k, p in params.items()}


def meta_model(seed=0, config=TINY):
    return MetaModel.create(4, np.random.default_rng(seed), config)


class TestInnerAdapt:
    def test_zero_steps_is_identity(self):
        meta = meta_model()
        learner = inner_adapt(meta.params, tiny_tasks(1)[0], 0, TINY, np.random.default_rng(0))
        for k, v in learner.agent.params().items():
            assert v.flat().tobytes() == meta.params[k].flat().tobytes()

    def test_deterministic(self):
        meta = meta_model()
        task = tiny_tasks(1)[0]
        a = inner_adapt(meta.params, task, 3, TINY, np.random.default_rng(5))
        b = inner_adapt(meta.params, task, 3, TINY, np.random.default_rng(5))
        for k, v in a.agent.params().items():
            assert_array_equal(v.flat(), b.agent.params()[k].flat())

    def test_meta_params_untouched(self):
        meta = meta_model()
        before = flat_params(meta.params)
        inner_adapt(meta.params, tiny_tasks(1)[0], 3, TINY, np.random.default_rng(0))
        for k, v in meta.params.items():
            assert_array_equal(v.flat(), before[k])

    def test_support_and_query_disjoint_episodes(self):
        cfg = replace(TINY, eval_episodes=4)
        learner = inner_adapt(meta_model().params, tiny_tasks(1)[0], 0, cfg, np.random.default_rng(0))
        assert len(learner.support["higher"]) == 2 * cfg.episode_len
        assert len(learner.query["higher"]) == 2 * cfg.episode_len

    def test_support_loss_decreases(self):
        cfg = replace(TINY, eval_episodes=4, episode_len=10)
        wins = 0
        for trial in range(20):
            meta = meta_model(trial, cfg)
            task = tiny_tasks(1, trial)[0]
            rng = np.random.default_rng(trial)
            learner = inner_adapt(meta.params, task, 0, cfg, rng)
            before = support_loss(learner)
            train_hrl(learner.agent, learner.support, 10, rng)
            wins += support_loss(learner) <= before
        assert wins >= 16


def zero_critic_heads(learner):
    for ag in learner.agent.agents.values():
        for net in (ag.critic, ag.critic_target):
            net.weights[-1][:] = 0.0
            net.biases[-1][:] = 0.0


class TestQueryGrads:
    def test_unadapted_equals_task_gradient(self):
        meta = meta_model()
        learner = inner_adapt(meta.params, tiny_tasks(1)[0], 0, TINY, np.random.default_rng(0))
        q = query_grads(learner, np.random.default_rng(9))
        rng = np.random.default_rng(9)
        fresh = HRLAgent.from_params(meta.params, TINY.hrl, 4)
        for lv in LEVELS:
            buf = learner.query[lv]
            if not len(buf):
                continue
            batch = buf.sample(TINY.hrl.ddpg.batch_size, rng)
            _, cg = critic_loss_and_grad(fresh.agents[lv], batch)
            _, ag = actor_loss_and_grad(fresh.agents[lv], batch)
            assert_array_equal(q.grads[f"{lv}.critic"].flat(), cg.flat())
            assert_array_equal(q.grads[f"{lv}.actor"].flat(), ag.flat())

    def test_reward_scaling_scales_critic_gradient(self):
        learner = inner_adapt(meta_model().params, tiny_tasks(1)[0], 0, TINY, np.random.default_rng(0))
        zero_critic_heads(learner)
        g1 = query_grads(learner, np.random.default_rng(3))
        g2 = query_grads(learner, np.random.default_rng(3), reward_scale=2.0)
        for lv in LEVELS:
            if lv in g1.losses:
                a, b = g1.grads[f"{lv}.critic"], g2.grads[f"{lv}.critic"]
                assert_allclose(b.flat(), 2 * a.flat(), rtol=1e-12, atol=1e-15)
                assert b.norm() == pytest.approx(2 * a.norm())
                assert g2.losses[lv][0] == pytest.approx(4 * g1.losses[lv][0])

    def test_identical_tasks_identical_contributions(self):
        meta = meta_model()
        task = tiny_tasks(1)[0]
        outs = []
        for _ in range(2):
            learner = inner_adapt(meta.params, task, 2, TINY, np.random.default_rng(4))
            outs.append(query_grads(learner, np.random.default_rng(4)))
        for k in outs[0].grads:
            assert_array_equal(outs[0].grads[k].flat(), outs[1].grads[k].flat())
        assert_array_equal(outs[0].td, outs[1].td)

    def test_empty_query_raises(self):
        learner = inner_adapt(meta_model().params, tiny_tasks(1)[0], 0, TINY, np.random.default_rng(0))
        for buf in learner.query.values():
            buf.size = 0
        with pytest.raises(DomainError):
            query_grads(learner, np.random.default_rng(0))


class TestVariance:
    def test_constant(self):
        assert td_variance([3.0] * 10) == 0.0

    def test_unbiased(self):
        assert td_variance([0.0, 2.0]) == 2.0

    def test_permutation(self):
        x = np.random.default_rng(0).normal(size=50)
        assert td_variance(x) == pytest.approx(td_variance(x[::-1]), rel=1e-12)
        assert td_variance(x) == pytest.approx(td_variance(np.random.default_rng(1).permutation(x)), rel=1e-12)

    def test_too_short(self):
        with pytest.raises(DomainError):
            td_variance([1.0])

    def test_window_keeps_most_recent(self):
        ws = WeightState(window=4)
        ws.push(0, [100.0, -100.0, 1.0, 1.0])
        ws.push(0, [1.0, 1.0])
        ws.push(1, [0.0, 2.0])
        w = ws.compute([0, 1])
        assert_array_equal(ws.variances, [0.0, 2.0])
        assert_allclose(w, softmin_weights([0.0, 2.0]))


class TestSoftmin:
    def test_equal_seven(self):
        assert_allclose(softmin_weights([0.3] * 7), np.full(7, 1 / 7), rtol=1e-15)

    def test_two_values(self):
        assert_allclose(softmin_weights([1.0, 2.0]), [0.7311, 0.2689], atol=1e-4)

    def test_limit(self):
        assert_allclose(softmin_weights([0.0, 1000.0]), [1.0, 0.0], atol=1e-12)

    def test_errors(self):
        for bad in ([], [1.0, np.nan], [np.inf]):
            with pytest.raises(DomainError):
                softmin_weights(bad)

    @settings(max_examples=200)
    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=12), st.floats(-1e3, 1e3))
    def test_properties(self, v, shift):
        w = softmin_weights(v)
        assert abs(w.sum() - 1) < 1e-9
        assert np.all(w >= 0)
        order = np.argsort(v)
        assert np.all(np.diff(w[order]) <= 1e-15)
        assert_allclose(softmin_weights(np.asarray(v) + shift), w, atol=1e-12)


def fake_contribution(meta, fill):
    return {k: Gradients([np.full_like(w, fill) for w in p.weights], [np.full_like(b, fill) for b in p.biases]) for k, p in meta.params.items()}


def random_contribution(meta, rng):
    return {k: Gradients([rng.normal(size=w.shape) for w in p.weights], [rng.normal(size=b.shape) for b in p.biases]) for k, p in meta.params.items()}


class TestMetaUpdate:
    def test_zero_grads(self):
        meta = meta_model()
        new = meta_update(meta, [fake_contribution(meta, 0.0)] * 3, uniform_weights(3), 1e-3)
        for k in meta.params:
            assert_array_equal(new.params[k].flat(), meta.params[k].flat())

    def test_one_hot_equals_single_task(self):
        meta = meta_model()
        rng = np.random.default_rng(0)
        contribs = [random_contribution(meta, rng) for _ in range(3)]
        a = meta_update(meta, contribs, [0.0, 1.0, 0.0], 1e-3)
        b = meta_update(meta, [contribs[1]], [1.0], 1e-3)
        for k in meta.params:
            assert_array_equal(a.params[k].flat(), b.params[k].flat())

    def test_equal_variance_adaptive_is_uniform(self):
        meta = meta_model()
        rng = np.random.default_rng(1)
        contribs = [random_contribution(meta, rng) for _ in range(4)]
        a = meta_update(meta, contribs, softmin_weights([0.7] * 4), 1e-3)
        b = meta_update(meta, contribs, uniform_weights(4), 1e-3)
        for k in meta.params:
            assert a.params[k].flat().tobytes() == b.params[k].flat().tobytes()

    def test_input_not_mutated(self):
        meta = meta_model()
        before = flat_params(meta.params)
        meta_update(meta, [fake_contribution(meta, 1.0)], [1.0], 1e-3)
        for k in meta.params:
            assert_array_equal(meta.params[k].flat(), before[k])

    def test_weights_must_sum_to_one(self):
        meta = meta_model()
        with pytest.raises(DomainError):
            meta_update(meta, [fake_contribution(meta, 1.0)] * 2, [0.5, 0.6], 1e-3)

    def test_shape_mismatch(self):
        meta = meta_model()
        other = MetaModel.create(5, np.random.default_rng(0), TINY)
        with pytest.raises(DomainError):
            meta_update(meta, [fake_contribution(other, 1.0)], [1.0], 1e-3)

    def test_per_network_rates(self):
        cfg = replace(TINY, meta_lr=1e-4, meta_critic_lr=1e-3, meta_lr_decay=1.0)
        assert cfg.meta_lr_at(0, "higher.actor") == 1e-4
        assert cfg.meta_lr_at(0, "higher.critic") == 1e-3
        assert cfg.meta_lr_at(3, "lower_embb.critic") == pytest.approx(2.5e-4)


@pytest.fixture(scope="module")
def trained():
    tasks = tiny_tasks(3)
    return tasks, meta_train(tasks, TINY, seed=1)


class TestMetaTrain:
    def test_log_schema(self, trained):
        tasks, (_, log) = trained
        assert len(log.rows) == TINY.iterations * len(tasks)
        assert all(set(r) == set(MetaLog.HEADER) for r in log.rows)
        for t in range(TINY.iterations):
            w = log.weights_at(t)
            assert len(w) == len(tasks)
            assert abs(w.sum() - 1) < 1e-9
            v = np.array([r["td_var"] for r in log.rows if r["iteration"] == t])
            for i in range(len(v)):
                for j in range(len(v)):
                    if v[i] < v[j]:
                        assert w[i] >= w[j]

    def test_deterministic(self, trained):
        tasks, (meta, log) = trained
        meta2, log2 = meta_train(tasks, TINY, seed=1)
        assert log.table() == log2.table()
        for k in meta.params:
            assert_array_equal(meta.params[k].flat(), meta2.params[k].flat())

    def test_parameters_move(self, trained):
        tasks, (meta, _) = trained
        init = MetaModel.create(4, np.random.default_rng([1, 0]), TINY)
        assert any(not np.array_equal(meta.params[k].flat(), init.params[k].flat()) for k in meta.params)

    def test_single_task_weight_one(self):
        _, log = meta_train(tiny_tasks(1), replace(TINY, iterations=2))
        assert all(r["weight"] == 1.0 for r in log.rows)

    def test_uniform_weights(self):
        _, log = meta_train(tiny_tasks(3), replace(TINY, weighting="uniform", iterations=2))
        assert all(r["weight"] == 1 / 3 for r in log.rows)

    def test_static_frozen_after_burn_in(self):
        cfg = replace(TINY, weighting="static", iterations=10, static_burn_in=0.2)
        _, log = meta_train(tiny_tasks(3), cfg)
        assert_array_equal(log.weights_at(0), uniform_weights(3))
        frozen = log.weights_at(2)
        for t in range(2, 10):
            assert_array_equal(log.weights_at(t), frozen)
        hist = np.array([[r["td_var"] for r in log.rows if r["iteration"] == t] for t in range(2)])
        assert_allclose(frozen, softmin_weights(hist.mean(axis=0)), rtol=1e-12)

    def test_mixed_ue_counts_rejected(self):
        tasks = tiny_tasks(1) + [TaskSpec(ue_count=5, rb_count=8)]
        with pytest.raises(ConfigError):
            meta_train(tasks, TINY)

    def test_process_pool_matches_serial(self, trained, monkeypatch):
        monkeypatch.delenv("METAHRL_MAX_WORKERS", raising=False)
        tasks, (_, log) = trained
        _, log2 = meta_train(tasks, replace(TINY, workers=2), seed=1)
        assert log.table() == log2.table()


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("METAHRL_MAX_WORKERS", "2")
    assert worker_count(8) == 2
    monkeypatch.delenv("METAHRL_MAX_WORKERS")
    assert worker_count(8) == 8
    assert worker_count(0) == 1


class TestAdaptation:
    def test_does_not_mutate_meta(self):
        meta = meta_model()
        before = flat_params(meta.params)
        meta_adapt(meta, tiny_tasks(1)[0], 3, TINY)
        for k in meta.params:
            assert_array_equal(meta.params[k].flat(), before[k])

    @pytest.mark.parametrize("shots", [0, 1, 4])
    def test_trace_length(self, shots):
        res = meta_adapt(meta_model(), tiny_tasks(1)[0], shots, TINY)
        assert len(res.trace) == shots

    def test_zero_shot_is_plain_evaluation(self):
        meta = meta_model()
        task = tiny_tasks(1)[0]
        res = meta_adapt(meta, task, 0, TINY, seed=3)
        agent = HRLAgent.from_params(meta.params, TINY.hrl, 4)
        assert res.final_reward == evaluate(agent, task, TINY, TINY.eval_rollouts, 3)[0]

    def test_five_shots_not_worse_than_zero(self):
        # paired comparison on held-out tasks with a briefly meta-trained initialisation
        cfg = replace(TINY, iterations=10, eval_rollouts=2, adapt_updates=10)
        wins = 0
        for seed in range(10):
            tasks = tiny_tasks(3, seed)
            held = tiny_tasks(4, seed)[-1]
            held = replace(held, seed=held.seed + 10_000)
            meta, _ = meta_train(tasks, cfg, seed=seed)
            zero = meta_adapt(meta, held, 0, cfg, seed).final_reward
            five = meta_adapt(meta, held, 5, cfg, seed).final_reward
            wins += five >= zero
        assert wins >= 7


class TestBaselines:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            run_baseline("oracle", tiny_tasks(2), tiny_tasks(1)[0], TINY, 1)

    def test_scratch_deterministic(self):
        a = run_baseline("scratch", tiny_tasks(2), tiny_tasks(1)[0], TINY, 2, seed=4)
        b = run_baseline("scratch", tiny_tasks(2), tiny_tasks(1)[0], TINY, 2, seed=4)
        assert a.adapt.trace == b.adapt.trace
        assert a.adapt.final_reward == b.adapt.final_reward

    @pytest.mark.parametrize("kind", ["transfer", "multitask"])
    def test_pretrained(self, kind):
        res = run_baseline(kind, tiny_tasks(2), tiny_tasks(1)[0], replace(TINY, iterations=2), 2)
        assert len(res.adapt.trace) == 2 and "source_task" in res.extra

    @pytest.mark.parametrize("kind,expected", [("uniform_meta", "uniform"), ("static_var", "static"), ("adaptive_var", "adaptive")])
    def test_meta_kinds(self, kind, expected):
        cfg = replace(TINY, iterations=5)
        res = run_baseline(kind, tiny_tasks(2), tiny_tasks(1)[0], cfg, 1)
        assert len(res.meta_log.rows) == 10
        if expected == "uniform":
            assert all(r["weight"] == 0.5 for r in res.meta_log.rows)
        if expected == "static":
            assert_array_equal(res.meta_log.weights_at(1), res.meta_log.weights_at(4))


def test_config_validation():
    with pytest.raises(ConfigError):
        MetaConfig(weighting="median")
    with pytest.raises(ConfigError):
        MetaConfig(support_fraction=1.0)
    with pytest.raises(ConfigError):
        MetaConfig(eval_episodes=1)

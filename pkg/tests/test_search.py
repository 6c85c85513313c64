import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fusenas.graph_ir import ArchitectureConfig, ConfigurationError
from fusenas.search import (
    ACCURACY_ANCHORS,
    ANCHOR_PAIRS,
    ActionSpace,
    Controller,
    Episode,
    OracleFailure,
    RewardParams,
    SearchConfig,
    SearchTrace,
    TASKS,
    evaluate_episode,
    reinforce_update,
    reward,
    run_search,
    sample_architecture,
    surrogate_accuracy,
    update_baseline,
)


def make_episode(actions, log_probs, r, phase=1, arch=None):
    return Episode(
        phase=phase,
        actions=tuple(actions),
        log_probs=tuple(log_probs),
        arch=arch or ArchitectureConfig(4, 256, 1024, seq_len=16),
        latency_s=0.01,
        accuracy=0.8,
        reward=r,
        terminated_early=False,
    )


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

class TestReward:
    def test_double_budget_gives_minus_two(self):
        params = RewardParams(required_latency_s=0.5, baseline=0.3)
        assert reward(0.9, 1.0, params) == -2.0

    def test_at_budget_with_accuracy_equal_baseline(self):
        params = RewardParams(required_latency_s=1.0, baseline=0.8)
        assert reward(0.8, 1.0, params) == 1.0

    def test_direct_substitution(self):
        params = RewardParams(required_latency_s=1.0, baseline=0.8)
        assert reward(0.9, 0.5, params) == pytest.approx(0.6, abs=1e-12)

    def test_infeasible_branch_ignores_accuracy(self):
        params = RewardParams(required_latency_s=1.0)
        assert reward(None, 2.0, params) == -2.0

    def test_nonpositive_budget_rejected(self):
        with pytest.raises(ConfigurationError):
            RewardParams(required_latency_s=0.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(0, 1),
        st.floats(1e-6, 10),
        st.floats(1e-3, 5),
        st.floats(-1, 1),
    )
    def test_branch_selection_exact(self, acc, latency, budget, baseline):
        params = RewardParams(required_latency_s=budget, baseline=baseline)
        r = reward(acc, latency, params)
        if latency > budget:
            assert r == (budget - latency) / budget - 1.0
        else:
            assert r == (acc - baseline) + latency / budget


class TestBaseline:
    def test_fixed_point(self):
        assert update_baseline(0.7, 0.7, 0.9) == pytest.approx(0.7)

    def test_decay_close_to_one_changes_nothing(self):
        decay = 1.0 - 1e-12
        assert update_baseline(0.5, 0.9, decay) == pytest.approx(0.5, abs=1e-11)

    def test_converges_geometrically(self):
        b = 0.0
        errs = []
        for _ in range(30):
            b = update_baseline(b, 0.9, 0.8)
            errs.append(abs(b - 0.9))
        ratios = [b / a for a, b in zip(errs, errs[1:])]
        assert all(r == pytest.approx(0.8, abs=1e-9) for r in ratios)


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

class TestController:
    def test_single_choice_log_prob_zero(self):
        ctrl = Controller.create((1,), seed=0)
        actions, log_probs = ctrl.sample(np.random.default_rng(0))
        assert actions == [0]
        assert log_probs == [0.0]

    def test_single_choice_gradient_exactly_zero(self):
        ctrl = Controller.create((1,), seed=0)
        ep = make_episode([0], [0.0], 1.0)
        grads = ctrl.gradient([ep])
        for name in ("head_w0", "head_b0"):
            assert np.all(grads[name] == 0.0)

    def test_fresh_controller_samples_uniformly(self):
        ctrl = Controller.create((13,), seed=3)
        rng = np.random.default_rng(0)
        counts = np.zeros(13)
        for _ in range(10_000):
            a, _ = ctrl.sample(rng)
            counts[a[0]] += 1
        assert counts.min() > 0
        result = stats.chisquare(counts)
        assert result.pvalue > 0.001

    def test_analytic_gradient_matches_finite_differences(self):
        ctrl = Controller.create((5, 3), hidden=8, seed=9)
        rng = np.random.default_rng(2)
        for key in ctrl.params:
            ctrl.params[key] = ctrl.params[key] + rng.normal(0, 0.05, ctrl.params[key].shape)
        episodes = []
        for i in range(4):
            a, lp = ctrl.sample(np.random.default_rng(50 + i))
            episodes.append(make_episode(a, lp, float(rng.normal())))
        grads = ctrl.gradient(episodes)
        step = 1e-5
        worst = 0.0
        for key, grad in grads.items():
            param = ctrl.params[key]
            it = np.nditer(param, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = param[idx]
                param[idx] = orig + step
                up = ctrl.objective(episodes)
                param[idx] = orig - step
                down = ctrl.objective(episodes)
                param[idx] = orig
                fd = (up - down) / (2 * step)
                if max(abs(fd), abs(grad[idx])) > 1e-8:
                    rel = abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx]))
                    worst = max(worst, rel)
        assert worst <= 1e-4

    def test_two_armed_bandit_converges(self):
        ctrl = Controller.create((2,), hidden=8, seed=0)
        rng = np.random.default_rng(7)
        arm_reward = [1.0, 0.0]
        for _ in range(200):
            batch = []
            for _ in range(5):
                a, lp = ctrl.sample(rng)
                batch.append(make_episode(a, lp, arm_reward[a[0]]))
            ctrl = reinforce_update(ctrl, batch, 0.15)
        _, _, states = ctrl._forward([0], None)
        assert states[0][3][0] >= 0.95

    def test_reward_scaling_preserves_gradient_signs(self):
        ctrl = Controller.create((4, 2), hidden=8, seed=5)
        rng = np.random.default_rng(3)
        for key in ctrl.params:
            ctrl.params[key] = ctrl.params[key] + rng.normal(0, 0.05, ctrl.params[key].shape)
        episodes = [
            make_episode(*ctrl.sample(np.random.default_rng(i)), float(rng.normal()))
            for i in range(5)
        ]
        scaled = [
            Episode(
                ep.phase, ep.actions, ep.log_probs, ep.arch, ep.latency_s,
                ep.accuracy, ep.reward * 7.5, ep.terminated_early,
            )
            for ep in episodes
        ]
        g1 = ctrl.gradient(episodes)
        g2 = ctrl.gradient(scaled)
        for key in g1:
            assert np.array_equal(np.sign(g1[key]), np.sign(g2[key]))

    def test_update_requires_finite_reward(self):
        ctrl = Controller.create((2,), seed=0)
        ep = make_episode([0], [-0.7], float("nan"))
        with pytest.raises(ValueError):
            reinforce_update(ctrl, [ep], 0.05)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

class TestSampling:
    def test_single_choice_space(self):
        space = ActionSpace(
            phase1_depths=(6,), phase2_hidden=(256,), phase2_intermediate=(4,)
        )
        ctrl = Controller.create((1,), seed=0)
        arch, actions, log_probs = sample_architecture(
            ctrl, space, 1, np.random.default_rng(0)
        )
        assert arch.num_blocks == 6
        assert log_probs == (0.0,)

    def test_phase2_carries_frozen_depth(self):
        space = ActionSpace()
        ctrl = Controller.create((13, 3), seed=0)
        for seed in range(20):
            arch, _, _ = sample_architecture(
                ctrl, space, 2, np.random.default_rng(seed), frozen_depth=10
            )
            assert arch.num_blocks == 10
            assert arch.hidden_size % 64 == 0
            assert arch.hidden_size >= 256

    def test_sampled_arch_always_valid(self):
        space = ActionSpace()
        ctrl = Controller.create((13,), seed=1)
        for seed in range(50):
            arch, _, _ = sample_architecture(ctrl, space, 1, np.random.default_rng(seed))
            assert arch.hidden_size == space.phase1_hidden

    def test_hidden_bounds_enforced_in_space(self):
        with pytest.raises(ConfigurationError):
            ActionSpace(phase2_hidden=(128,))


# ---------------------------------------------------------------------------
# Surrogate oracle
# ---------------------------------------------------------------------------

class TestSurrogate:
    @pytest.mark.parametrize("task", TASKS)
    def test_within_group_orderings_preserved(self, task):
        for deep, shallow in ANCHOR_PAIRS:
            a = surrogate_accuracy(ArchitectureConfig(deep[0], deep[1], 4 * deep[1]), task)
            b = surrogate_accuracy(
                ArchitectureConfig(shallow[0], shallow[1], 4 * shallow[1]), task
            )
            assert a > b, (task, deep, shallow)

    def test_full_epochs_deterministic(self):
        arch = ArchitectureConfig(8, 512, 2048)
        a = surrogate_accuracy(arch, "MRPC", epochs=3, seed=1)
        b = surrogate_accuracy(arch, "MRPC", epochs=3, seed=2)
        assert a == b  # no noise at full epochs regardless of seed

    def test_early_stage_noise_is_seeded(self):
        arch = ArchitectureConfig(8, 512, 2048)
        a = surrogate_accuracy(arch, "MRPC", epochs=1, seed=1)
        b = surrogate_accuracy(arch, "MRPC", epochs=1, seed=1)
        c = surrogate_accuracy(arch, "MRPC", epochs=1, seed=2)
        assert a == b
        assert a != c

    def test_strictly_increasing_in_depth(self):
        vals = [
            surrogate_accuracy(ArchitectureConfig(l, 512, 2048), "MRPC")
            for l in range(2, 30)
        ]
        assert all(x < y for x, y in zip(vals, vals[1:]))

    def test_unknown_task(self):
        with pytest.raises(ConfigurationError):
            surrogate_accuracy(ArchitectureConfig(4, 256, 1024), "SQUAD")

    def test_range(self):
        for (l, h) in ACCURACY_ANCHORS:
            val = surrogate_accuracy(ArchitectureConfig(l, h, 4 * h), "RTE")
            assert 0.0 <= val <= 1.0


# ---------------------------------------------------------------------------
# Episode evaluation
# ---------------------------------------------------------------------------

class CountingOracle:
    def __init__(self, value=0.9):
        self.calls = 0
        self.value = value

    def evaluate(self, arch, task, epochs, seed):
        self.calls += 1
        return self.value


class TestEvaluateEpisode:
    def run_one(self, latency, budget_s=1.0, oracle=None):
        oracle = oracle or CountingOracle()
        params = RewardParams(required_latency_s=budget_s, baseline=0.5)
        episode = evaluate_episode(
            ArchitectureConfig(4, 256, 1024, seq_len=16),
            (0,), (-0.5,), 1, oracle, lambda a: latency, params, "MRPC", 3, seed=0,
        )
        return episode, oracle

    def test_over_budget_skips_oracle(self):
        episode, oracle = self.run_one(latency=2.0, budget_s=1.0)
        assert episode.terminated_early
        assert episode.reward == -2.0
        assert episode.accuracy is None
        assert oracle.calls == 0

    def test_under_budget_joins_both_paths(self):
        episode, oracle = self.run_one(latency=0.5, budget_s=1.0)
        assert not episode.terminated_early
        assert oracle.calls == 1
        assert episode.reward == pytest.approx((0.9 - 0.5) + 0.5)

    def test_early_termination_soundness(self):
        episode, _ = self.run_one(latency=5.0)
        assert episode.terminated_early and episode.accuracy is None

    def test_deterministic(self):
        a, _ = self.run_one(latency=0.25)
        b, _ = self.run_one(latency=0.25)
        assert a == b

    def test_oracle_failure_propagates(self):
        class Failing:
            def evaluate(self, arch, task, epochs, seed):
                raise RuntimeError("trainer crashed")

        with pytest.raises(OracleFailure):
            self.run_one(latency=0.1, oracle=Failing())


# ---------------------------------------------------------------------------
# Search loop
# ---------------------------------------------------------------------------

def quick_config(**overrides):
    base = dict(
        required_latency_ms=200.0,
        seed=0,
        phase1_episodes=30,
        phase2_episodes=15,
        seq_len=16,
        space=ActionSpace(
            phase1_depths=(4, 6, 8, 10, 12, 14),
            phase2_hidden=(256, 320, 384),
            phase2_intermediate=(2, 4),
        ),
    )
    base.update(overrides)
    return SearchConfig(**base)


def block_latency(arch):
    return 0.01 * arch.num_blocks  # 10 ms per block


class TestRunSearch:
    def test_budget_excludes_deep_models(self):
        # rL admits depths <= 12 only
        config = quick_config(required_latency_ms=125.0)
        result = run_search(config, latency_fn=block_latency)
        assert result.feasible
        assert result.best.arch.num_blocks <= 12
        assert result.best.latency_s <= 0.125

    def test_unbounded_budget_selects_max_accuracy_depth(self):
        hits = 0
        for seed in range(10):
            config = quick_config(required_latency_ms=math.inf, seed=seed,
                                  phase1_episodes=50, phase2_episodes=0)
            result = run_search(config, latency_fn=block_latency)
            winner = result.trace.phase_winners[1]
            best_depth = max(
                config.space.phase1_depths,
                key=lambda l: surrogate_accuracy(
                    ArchitectureConfig(l, 512, 2048, seq_len=16), "MRPC"
                ),
            )
            hits += winner is not None and winner.num_blocks == best_depth
        assert hits >= 8

    def test_zero_budget_is_infeasible_not_a_crash(self):
        config = quick_config(phase1_episodes=0, phase2_episodes=0)
        result = run_search(config, latency_fn=block_latency)
        assert not result.feasible
        assert result.trace.episodes == []

    def test_everything_over_budget_reports_infeasible(self):
        config = quick_config(required_latency_ms=1.0, phase1_episodes=10, phase2_episodes=5)
        result = run_search(config, latency_fn=block_latency)
        assert not result.feasible
        assert all(ep.terminated_early for ep in result.trace.episodes)

    def test_trace_replay_reproduces_exactly(self):
        config = quick_config(seed=11)
        a = run_search(config, latency_fn=block_latency)
        b = run_search(config, latency_fn=block_latency)
        assert a.trace.to_jsonl() == b.trace.to_jsonl()

    def test_best_reward_maximal_among_recorded(self):
        config = quick_config(seed=4)
        result = run_search(config, latency_fn=block_latency)
        usable = [ep for ep in result.trace.episodes if not ep.terminated_early]
        assert result.trace.best.reward == max(ep.reward for ep in usable)

    def test_early_terminated_episodes_have_no_accuracy(self):
        config = quick_config(required_latency_ms=90.0, seed=2)
        result = run_search(config, latency_fn=block_latency)
        for ep in result.trace.episodes:
            if ep.terminated_early:
                assert ep.accuracy is None

    def test_best_feasible_on_reevaluation(self):
        config = quick_config(required_latency_ms=110.0, seed=6)
        result = run_search(config, latency_fn=block_latency)
        assert block_latency(result.best.arch) <= 0.110

    def test_phase2_episodes_use_phase1_depth(self):
        config = quick_config(seed=9)
        result = run_search(config, latency_fn=block_latency)
        winner = result.trace.phase_winners[1]
        for ep in result.trace.episodes:
            if ep.phase == 2:
                assert ep.arch.num_blocks == winner.num_blocks


# ---------------------------------------------------------------------------
# Trace and config formats
# ---------------------------------------------------------------------------

class TestFormats:
    def test_trace_round_trip(self):
        config = quick_config(seed=8, phase1_episodes=10, phase2_episodes=5)
        result = run_search(config, latency_fn=block_latency)
        text = result.trace.to_jsonl()
        clone = SearchTrace.from_jsonl(text)
        assert clone.to_jsonl() == text

    def test_trace_version_refused(self):
        header = json.dumps({"format": "fusenas-trace", "version": 9, "config": {}})
        with pytest.raises(Exception, match="version"):
            SearchTrace.from_jsonl(header + "\n")

    def test_search_config_round_trip(self):
        config = quick_config(required_latency_ms=77.0, seed=13)
        clone = SearchConfig.from_dict(config.to_dict())
        assert clone == config

    def test_infinite_budget_serializes_as_null(self):
        config = quick_config(required_latency_ms=math.inf)
        doc = config.to_dict()
        assert doc["rL_ms"] is None
        assert math.isinf(SearchConfig.from_dict(doc).required_latency_ms)

import math
import random

import numpy as np
import pytest

from builders import make_profile, make_sample
from dvmap.grpo import (
    GrpoError,
    RewardConfig,
    RolloutGroup,
    TabularPolicy,
    TrainerConfig,
    compute_reward,
    group_advantages,
    grpo_gradient,
    grpo_step,
    majority_class_accuracy,
    make_group,
    objective,
    policy_predict,
    train_toy,
)
from dvmap.prompt import ParseResult


def ok(index, label="x"):
    return ParseResult(status="ok", label=label, index=index)


NO_TAG = ParseResult(status="format_error", reason="no_tag")
BAD_LABEL = ParseResult(status="format_error", reason="unknown_label")


class TestComputeReward:
    # Each row: (config, parse, truth, K, expected)
    CASES = [
        (RewardConfig(mode="binary", beta=0.1), ok(2), 2, 4, 1.1),
        (RewardConfig(mode="binary", beta=0.1), ok(0), 2, 4, 0.1),
        (RewardConfig(mode="binary", beta=0.1), NO_TAG, 2, 4, 0.0),
        (RewardConfig(mode="binary", beta=0.1), BAD_LABEL, 2, 4, 0.0),
        (RewardConfig(mode="likert_soft", alpha=1.0, beta=0.0), ok(1), 2, 3, 0.5),
        (RewardConfig(mode="likert_soft", alpha=1.0, beta=0.1), ok(3), 3, 4, 1.1),
        (RewardConfig(mode="likert_soft", alpha=1.0, beta=0.1), ok(0), 3, 4, 0.1),
        (RewardConfig(mode="likert_soft", alpha=1.0, beta=0.1), NO_TAG, 3, 4, 0.0),
    ]

    @pytest.mark.parametrize("cfg,parse,truth,k,expected", CASES)
    def test_eight_case_table(self, cfg, parse, truth, k, expected):
        assert compute_reward(parse, truth, k, cfg) == pytest.approx(expected, abs=1e-12)

    def test_binary_codomain(self):
        cfg = RewardConfig(mode="binary", beta=0.25)
        vals = {compute_reward(p, t, 3, cfg)
                for p in (ok(0), ok(1), NO_TAG) for t in (0, 1, 2)}
        assert vals <= {0.0, 0.25, 1.25}

    def test_soft_stays_in_band(self):
        cfg = RewardConfig(mode="likert_soft", alpha=0.8, beta=0.3)
        for k in range(2, 7):
            for pred in range(k):
                for truth in range(k):
                    r = compute_reward(ok(pred), truth, k, cfg)
                    assert 0.0 <= r <= cfg.alpha + cfg.beta + 1e-12

    def test_soft_needs_two_options(self):
        with pytest.raises(GrpoError, match="K >= 2"):
            compute_reward(ok(0), 0, 1, RewardConfig(mode="likert_soft"))

    def test_unknown_mode_rejected(self):
        with pytest.raises(GrpoError, match="mode"):
            compute_reward(ok(0), 0, 3, RewardConfig(mode="huber"))


class TestGroupAdvantages:
    def test_single_spike(self):
        adv = group_advantages([1.0, 0.0, 0.0, 0.0])
        assert adv[0] == pytest.approx(1.732, abs=1e-3)
        for v in adv[1:]:
            assert v == pytest.approx(-0.577, abs=1e-3)

    def test_all_equal_is_all_zero(self):
        assert group_advantages([0.5, 0.5, 0.5]) == [0.0, 0.0, 0.0]

    def test_singleton_group(self):
        assert group_advantages([3.25]) == [0.0]

    def test_empty_group_rejected(self):
        with pytest.raises(GrpoError):
            group_advantages([])

    def test_sum_zero_and_unit_variance(self):
        rng = random.Random(5)
        for _ in range(200):
            g = rng.randint(1, 12)
            rewards = [rng.choice([0.0, 0.1, 0.5, 1.1]) for _ in range(g)]
            adv = group_advantages(rewards)
            assert abs(sum(adv)) < 1e-9
            mean = sum(rewards) / g
            var = sum((r - mean) ** 2 for r in rewards) / g
            if var > 1e-6:
                adv_var = sum(a * a for a in adv) / g
                # eps in the denominator shaves a hair off exact unit variance
                assert adv_var == pytest.approx(1.0, abs=1e-5)


class TestPolicyPredict:
    def test_argmax_reads_logits(self):
        policy = TabularPolicy(logits={"k": np.array([5.0, 0.0, 0.0])})
        sample = make_sample("a-Q49", "Q49", 0)
        key = policy.key_for(sample)
        policy.logits[key] = np.array([5.0, 0.0, 0.0])
        assert policy_predict(policy, sample, mode="argmax") == 0
        policy.logits[key] = np.array([0.0, 0.0, 4.0])
        assert policy_predict(policy, sample, mode="argmax") == 2

    def test_unseen_key_is_uniform_and_ties_break_low(self):
        policy = TabularPolicy()
        sample = make_sample("a-Q46", "Q46", 0)
        assert policy_predict(policy, sample, mode="argmax") == 0
        probs = policy.probabilities(policy.key_for(sample), sample.K)
        assert np.allclose(probs, 0.25)

    def test_softmax_sampling_is_reproducible(self):
        policy = TabularPolicy()
        sample = make_sample("a-Q46", "Q46", 0)
        draws_a = [policy_predict(policy, sample, mode="softmax",
                                  rng=np.random.Generator(np.random.Philox(key=9)))
                   for _ in range(1)]
        draws_b = [policy_predict(policy, sample, mode="softmax",
                                  rng=np.random.Generator(np.random.Philox(key=9)))
                   for _ in range(1)]
        assert draws_a == draws_b

    def test_softmax_without_rng_rejected(self):
        policy = TabularPolicy()
        sample = make_sample("a-Q46", "Q46", 0)
        with pytest.raises(GrpoError, match="rng"):
            policy_predict(policy, sample, mode="softmax")

    def test_unknown_mode_rejected(self):
        policy = TabularPolicy()
        sample = make_sample("a-Q46", "Q46", 0)
        with pytest.raises(GrpoError, match="mode"):
            policy_predict(policy, sample, mode="beam")

    def test_row_length_mismatch_rejected(self):
        policy = TabularPolicy()
        sample = make_sample("a-Q46", "Q46", 0)
        policy.logits[policy.key_for(sample)] = np.zeros(3)
        with pytest.raises(GrpoError, match="options"):
            policy_predict(policy, sample, mode="argmax")


class TestGradient:
    def _random_groups(self, rng, key, k, n_groups):
        groups = []
        for _ in range(n_groups):
            g = rng.randint(2, 6)
            indices = tuple(rng.randrange(k) for _ in range(g))
            rewards = tuple(rng.choice([0.0, 0.1, 1.1]) for _ in range(g))
            groups.append(RolloutGroup(
                sample_id="s", key=key, k=k, indices=indices,
                rewards=rewards, advantages=tuple(group_advantages(rewards)),
            ))
        return groups

    def test_matches_central_differences(self):
        rng = random.Random(77)
        for trial in range(100):
            k = rng.randint(2, 5)
            key = f"row{trial}"
            policy = TabularPolicy(
                temperature=rng.choice([0.7, 1.0, 1.6]),
                logits={key: np.array([rng.uniform(-2, 2) for _ in range(k)])},
            )
            groups = self._random_groups(rng, key, k, rng.randint(1, 3))
            grad = grpo_gradient(policy, groups).get(key, np.zeros(k))
            h = 1e-5
            base = policy.logits[key].copy()
            for j in range(k):
                policy.logits[key] = base.copy()
                policy.logits[key][j] += h
                up = objective(policy, groups)
                policy.logits[key] = base.copy()
                policy.logits[key][j] -= h
                down = objective(policy, groups)
                assert abs(grad[j] - (up - down) / (2 * h)) < 1e-6
            policy.logits[key] = base

    def test_objective_hand_case(self):
        # One group, uniform row over K=2: log pi = log 0.5 for both rollouts.
        policy = TabularPolicy(logits={"k": np.zeros(2)})
        g = RolloutGroup(sample_id="s", key="k", k=2, indices=(0, 1),
                         rewards=(1.0, 0.0), advantages=(1.0, -1.0))
        # (1 * log 0.5 + (-1) * log 0.5) / 2 = 0
        assert objective(policy, [g]) == pytest.approx(0.0, abs=1e-12)

    def test_objective_requires_groups(self):
        with pytest.raises(GrpoError):
            objective(TabularPolicy(), [])

    def test_zero_advantages_leave_policy_untouched(self):
        policy = TabularPolicy()
        g = RolloutGroup(sample_id="s", key="k", k=3, indices=(0, 1, 2),
                         rewards=(0.5, 0.5, 0.5), advantages=(0.0, 0.0, 0.0))
        grpo_step(policy, [g], learning_rate=10.0)
        assert policy.logits == {}

    def test_advantaged_option_logit_increases(self):
        policy = TabularPolicy()
        rewards = (1.1, 0.1, 0.1, 0.1)
        g = RolloutGroup(sample_id="s", key="k", k=3, indices=(0, 1, 1, 2),
                         rewards=rewards, advantages=tuple(group_advantages(rewards)))
        grpo_step(policy, [g], learning_rate=1.0)
        row = policy.logits["k"]
        assert row[0] > 0.0
        assert row[1] < 0.0


class TestMakeGroup:
    def test_scores_indices_against_truth(self):
        sample = make_sample("a-Q46", "Q46", 1)
        policy = TabularPolicy()
        group = make_group(policy, sample, [1, 0, 1, 2], RewardConfig(mode="binary", beta=0.1))
        assert group.rewards == (1.1, 0.1, 1.1, 0.1)
        assert group.k == 4
        assert group.key == policy.key_for(sample)
        assert abs(sum(group.advantages)) < 1e-9
        assert group.advantages[0] > 0 > group.advantages[1]


class TestTrainToy:
    def _planted_corpus(self):
        # One sample per policy key; each key has a single consistent truth.
        countries = ["USA", "DEU", "JPN", "BRA"]
        samples = []
        for i, country in enumerate(countries):
            prof = make_profile(country=country)
            samples.append(make_sample(f"s{i}-Q46", "Q46", truth_index=i % 4, profile=prof))
        return samples

    def test_converges_on_tiny_planted_corpus(self):
        samples = self._planted_corpus()
        cfg = TrainerConfig(group_size=8, steps=60, learning_rate=25.0, seed=3)
        policy, trace = train_toy(samples, cfg)
        assert trace[-1]["argmax_accuracy"] == 1.0
        assert len(trace) == 60
        assert trace[0]["step"] == 0

    def test_soft_reward_also_converges(self):
        samples = self._planted_corpus()
        cfg = TrainerConfig(group_size=8, steps=60, learning_rate=25.0, seed=3,
                            reward=RewardConfig(mode="likert_soft", alpha=1.0, beta=0.1))
        _, trace = train_toy(samples, cfg)
        assert trace[-1]["argmax_accuracy"] == 1.0

    def test_trace_is_deterministic(self):
        samples = self._planted_corpus()
        cfg = TrainerConfig(group_size=4, steps=10, learning_rate=25.0, seed=7)
        policy_a, trace_a = train_toy(samples, cfg)
        policy_b, trace_b = train_toy(list(reversed(samples)), cfg)
        assert trace_a == trace_b
        assert policy_a.to_json() == policy_b.to_json()

    def test_zero_learning_rate_is_flat(self):
        samples = self._planted_corpus()
        cfg = TrainerConfig(group_size=4, steps=8, learning_rate=0.0, seed=1)
        policy, trace = train_toy(samples, cfg)
        assert len({t["argmax_accuracy"] for t in trace}) == 1
        for row in policy.logits.values():
            assert not np.any(row)

    def test_duplicate_sample_ids_rejected(self):
        s = make_sample("dup-Q46", "Q46", 0)
        with pytest.raises(GrpoError, match="duplicate"):
            train_toy([s, s], TrainerConfig(steps=1))

    def test_empty_corpus_rejected(self):
        with pytest.raises(GrpoError):
            train_toy([], TrainerConfig())

    def test_config_validation(self):
        with pytest.raises(GrpoError):
            TrainerConfig(group_size=0).validate()
        with pytest.raises(GrpoError):
            TrainerConfig(temperature=0.0).validate()
        with pytest.raises(GrpoError):
            TrainerConfig(steps=-1).validate()


class TestPolicySerialization:
    def test_round_trip(self):
        policy = TabularPolicy(temperature=0.8,
                               logits={"b": np.array([1.0, -0.5]), "a": np.array([0.0, 2.0, 1.0])})
        clone = TabularPolicy.from_json(policy.to_json())
        assert clone.temperature == 0.8
        assert clone.key_fields == policy.key_fields
        for key in policy.logits:
            assert np.array_equal(clone.logits[key], policy.logits[key])

    def test_json_keys_sorted(self):
        policy = TabularPolicy(logits={"b": np.zeros(2), "a": np.zeros(2)})
        assert list(policy.to_json()["logits"]) == ["a", "b"]


class TestMajorityBaseline:
    def test_per_question_mode(self):
        samples = [
            make_sample("a-Q46", "Q46", 0),
            make_sample("b-Q46", "Q46", 0),
            make_sample("c-Q46", "Q46", 1),
            make_sample("d-Q49", "Q49", 2),
        ]
        assert majority_class_accuracy(samples) == pytest.approx(0.75)

    def test_modal_tie_breaks_to_lowest_index(self):
        samples = [
            make_sample("a-Q46", "Q46", 1),
            make_sample("b-Q46", "Q46", 0),
        ]
        assert majority_class_accuracy(samples) == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(GrpoError):
            majority_class_accuracy([])

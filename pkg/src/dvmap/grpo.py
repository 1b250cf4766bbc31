"""Group-relative policy optimization on a tabular softmax policy.

Rewards are verifiable functions of the parsed answer. Advantages are
group-standardized rewards. The policy is a logit table keyed by a coarse
profile bucket plus question id, so the update has a closed-form gradient
and the whole training loop is exactly reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .artifacts import stable_u64
from .benchmark import CorpusSample
from .prompt import ParseResult

ADV_EPS = 1e-8
_KEY_SEP = "\x1f"

DEFAULT_KEY_FIELDS: tuple[str, ...] = ("country", "income_bracket", "religion")


class GrpoError(ValueError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "binary"      # "binary" or "likert_soft"
    alpha: float = 1.0        # soft answer-term weight
    beta: float = 0.1         # format-term weight, small so the answer dominates

    def validate(self) -> None:
        if self.mode not in ("binary", "likert_soft"):
            raise GrpoError(f"unknown reward mode: {self.mode!r}")

    def to_json(self) -> dict:
        return {"mode": self.mode, "alpha": self.alpha, "beta": self.beta}


def compute_reward(parse: ParseResult, truth_index: int, k: int, cfg: RewardConfig) -> float:
    """Reward for one completion.

    A missing or malformed answer tag gets neither the answer term nor the
    format bonus: the reward is exactly zero.
    """
    cfg.validate()
    if not parse.ok:
        return 0.0
    assert parse.index is not None
    if cfg.mode == "binary":
        answer = 1.0 if parse.index == truth_index else 0.0
    else:
        if k < 2:
            raise GrpoError(f"likert_soft reward needs K >= 2, got {k}")
        answer = cfg.alpha * (1.0 - abs(parse.index - truth_index) / (k - 1))
    return answer + cfg.beta


def group_advantages(rewards: Sequence[float], eps: float = ADV_EPS) -> list[float]:
    """Standardize rewards within one rollout group (population std).

    A zero-spread group carries no preference signal, so it maps to all
    zeros instead of dividing by (almost) nothing.
    """
    if not rewards:
        raise GrpoError("empty rollout group")
    n = len(rewards)
    mean = sum(rewards) / n
    var = sum((r - mean) ** 2 for r in rewards) / n
    std = math.sqrt(var)
    if std == 0.0:
        return [0.0] * n
    return [(r - mean) / (std + eps) for r in rewards]


@dataclass
class RolloutGroup:
    sample_id: str
    key: str
    k: int
    indices: tuple[int, ...]
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]


@dataclass
class TabularPolicy:
    key_fields: tuple[str, ...] = DEFAULT_KEY_FIELDS
    temperature: float = 1.0
    logits: dict[str, np.ndarray] = field(default_factory=dict)

    def key_for(self, sample: CorpusSample) -> str:
        parts = [getattr(sample.profile, f) for f in self.key_fields]
        parts.append(sample.question["id"])
        return _KEY_SEP.join(parts)

    def row(self, key: str, k: int) -> np.ndarray:
        """Logits for a key; unseen keys read as a uniform (all-zero) row."""
        row = self.logits.get(key)
        if row is None:
            return np.zeros(k, dtype=np.float64)
        if len(row) != k:
            raise GrpoError(f"row {key!r} has {len(row)} options, expected {k}")
        return row

    def probabilities(self, key: str, k: int) -> np.ndarray:
        return softmax(self.row(key, k) / self.temperature)

    def to_json(self) -> dict:
        return {
            "key_fields": list(self.key_fields),
            "temperature": self.temperature,
            "logits": {key: [float(v) for v in row]
                       for key, row in sorted(self.logits.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TabularPolicy":
        return cls(
            key_fields=tuple(obj["key_fields"]),
            temperature=float(obj["temperature"]),
            logits={k: np.asarray(v, dtype=np.float64) for k, v in obj["logits"].items()},
        )


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z)
    e = np.exp(shifted)
    return e / e.sum()


def policy_predict(
    policy: TabularPolicy,
    sample: CorpusSample,
    mode: str = "argmax",
    rng: np.random.Generator | None = None,
) -> int:
    """Predict an option index; argmax is deterministic (ties break low)."""
    probs = policy.probabilities(policy.key_for(sample), sample.K)
    if mode == "argmax":
        return int(np.argmax(probs))
    if mode == "softmax":
        if rng is None:
            raise GrpoError("softmax sampling needs an rng")
        return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, sample.K - 1))
    raise GrpoError(f"unknown prediction mode: {mode!r}")


def objective(policy: TabularPolicy, groups: Sequence[RolloutGroup]) -> float:
    """Mean over groups of (1/G) sum_i A_i log pi(o_i | key)."""
    if not groups:
        raise GrpoError("no rollout groups")
    total = 0.0
    for g in groups:
        probs = policy.probabilities(g.key, g.k)
        logp = np.log(probs)
        total += sum(a * logp[i] for a, i in zip(g.advantages, g.indices)) / len(g.indices)
    return total / len(groups)


def grpo_gradient(policy: TabularPolicy, groups: Sequence[RolloutGroup]) -> dict[str, np.ndarray]:
    """Exact gradient of `objective` with respect to each touched logit row.

    For pi = softmax(z / T):  d log pi(o) / dz = (onehot(o) - pi) / T.
    """
    if not groups:
        raise GrpoError("no rollout groups")
    grads: dict[str, np.ndarray] = {}
    m = len(groups)
    t = policy.temperature
    for g in groups:
        probs = policy.probabilities(g.key, g.k)
        adv = np.asarray(g.advantages, dtype=np.float64)
        idx = np.asarray(g.indices, dtype=np.int64)
        pull = np.bincount(idx, weights=adv, minlength=g.k)  # sum_i A_i onehot(o_i)
        contrib = (pull - adv.sum() * probs) / (len(g.indices) * t * m)
        acc = grads.get(g.key)
        if acc is None:
            grads[g.key] = contrib
        else:
            acc += contrib
    return grads


def grpo_step(
    policy: TabularPolicy,
    groups: Sequence[RolloutGroup],
    learning_rate: float,
) -> TabularPolicy:
    """One gradient-ascent update in place; zero advantages leave the table untouched."""
    for key, grad in grpo_gradient(policy, groups).items():
        if not np.any(grad):
            continue
        row = policy.logits.get(key)
        if row is None:
            row = np.zeros(len(grad), dtype=np.float64)
            policy.logits[key] = row
        row += learning_rate * grad
    return policy


def make_group(
    policy: TabularPolicy,
    sample: CorpusSample,
    indices: Sequence[int],
    cfg: RewardConfig,
) -> RolloutGroup:
    """Score a set of sampled option indices against the sample's truth."""
    rewards = tuple(
        compute_reward(
            ParseResult(status="ok", label=sample.question["options"][i], index=i),
            sample.truth_index, sample.K, cfg,
        )
        for i in indices
    )
    return RolloutGroup(
        sample_id=sample.sample_id,
        key=policy.key_for(sample),
        k=sample.K,
        indices=tuple(int(i) for i in indices),
        rewards=rewards,
        advantages=tuple(group_advantages(rewards)),
    )


@dataclass(frozen=True)
class TrainerConfig:
    group_size: int = 8
    steps: int = 200
    # Tuned for full-batch group averaging: the objective divides by the
    # number of groups, so per-row steps scale like lr / n_samples.
    learning_rate: float = 25.0
    temperature: float = 1.0
    seed: int = 0
    key_fields: tuple[str, ...] = DEFAULT_KEY_FIELDS
    reward: RewardConfig = RewardConfig()

    def validate(self) -> None:
        if self.group_size < 1:
            raise GrpoError("group_size must be >= 1")
        if self.steps < 0:
            raise GrpoError("steps must be >= 0")
        if self.temperature <= 0:
            raise GrpoError("temperature must be > 0")
        self.reward.validate()

    def to_json(self) -> dict:
        return {
            "group_size": self.group_size,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
            "temperature": self.temperature,
            "seed": self.seed,
            "key_fields": list(self.key_fields),
            "reward": self.reward.to_json(),
        }


def argmax_accuracy(policy: TabularPolicy, samples: Sequence[CorpusSample]) -> float:
    if not samples:
        raise GrpoError("no samples")
    hits = sum(
        1 for s in samples
        if policy_predict(policy, s, mode="argmax") == s.truth_index
    )
    return hits / len(samples)


def train_toy(
    samples: Sequence[CorpusSample],
    cfg: TrainerConfig,
) -> tuple[TabularPolicy, list[dict]]:
    """Full-batch on-policy training loop.

    Rollout randomness is a counter-style stream: each step derives one
    Philox block keyed by (seed, step) and sample i consumes row i, so the
    trace depends only on (corpus, cfg), never on scheduling or batching.
    """
    cfg.validate()
    if not samples:
        raise GrpoError("empty training corpus")
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise GrpoError("duplicate sample ids in training corpus")
    order = sorted(samples, key=lambda s: s.sample_id)

    policy = TabularPolicy(key_fields=cfg.key_fields, temperature=cfg.temperature)
    trace: list[dict] = []
    g = cfg.group_size

    for step in range(cfg.steps):
        rng = np.random.Generator(np.random.Philox(key=stable_u64("train_toy", cfg.seed, step)))
        uniforms = rng.random((len(order), g))

        # One softmax per distinct row per step.
        cum_by_key: dict[str, np.ndarray] = {}
        groups: list[RolloutGroup] = []
        reward_sum = 0.0
        for i, sample in enumerate(order):
            key = policy.key_for(sample)
            cum = cum_by_key.get(key)
            if cum is None:
                cum = np.cumsum(policy.probabilities(key, sample.K))
                cum_by_key[key] = cum
            idx = np.searchsorted(cum, uniforms[i], side="right").clip(0, sample.K - 1)
            group = make_group(policy, sample, idx.tolist(), cfg.reward)
            reward_sum += sum(group.rewards)
            groups.append(group)

        grpo_step(policy, groups, cfg.learning_rate)
        trace.append({
            "step": step,
            "mean_reward": reward_sum / (len(order) * g),
            "argmax_accuracy": argmax_accuracy(policy, order),
        })
    return policy, trace


def majority_class_accuracy(samples: Sequence[CorpusSample]) -> float:
    """Baseline: always answer each question's most common truth label."""
    if not samples:
        raise GrpoError("no samples")
    counts: dict[str, dict[int, int]] = {}
    for s in samples:
        counts.setdefault(s.question["id"], {}).setdefault(s.truth_index, 0)
        counts[s.question["id"]][s.truth_index] += 1
    modal = {qid: max(sorted(c), key=lambda i: c[i]) for qid, c in counts.items()}
    hits = sum(1 for s in samples if modal[s.question["id"]] == s.truth_index)
    return hits / len(samples)

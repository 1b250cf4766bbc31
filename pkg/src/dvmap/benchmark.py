"""Benchmark construction: deterministic splits and counterfactual pairs.

Consensus records become corpus samples routed into four buckets:

  train         seen countries x seen questions (most profiles)
  cross_demo    held-out profiles from the same country/question pool
  cross_country held-out countries x seen questions
  cross_value   seen countries x held-out questions

Profile routing hashes the profile key with the split seed so membership
is a pure function of (profile, seed) and whole profiles move together.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .archetype import ConsensusRecord, DemographicProfile, INCOME_BRACKETS
from .artifacts import stable_unit_float
from .survey import ATTRIBUTES, Codebook

DEFAULT_TRAIN_COUNTRIES: tuple[str, ...] = (
    "BRA", "CAN", "CHN", "EGY", "DEU", "IND", "JPN", "RUS", "GBR", "USA",
)
DEFAULT_TEST_COUNTRIES: tuple[str, ...] = (
    "AUS", "IDN", "IRN", "MEX", "NGA", "PAK", "TUR", "VNM",
)
DEFAULT_TRAIN_QUESTIONS: tuple[str, ...] = (
    "Q1", "Q2", "Q3", "Q4", "Q5", "Q6", "Q27", "Q29", "Q36", "Q46",
    "Q49", "Q50", "Q60", "Q69", "Q112", "Q131",
)
DEFAULT_CROSS_VALUE_QUESTIONS: tuple[str, ...] = (
    "Q8", "Q9", "Q37", "Q61", "Q70", "Q113", "Q132",
)

SPLIT_NAMES: tuple[str, ...] = ("train", "cross_demo", "cross_country", "cross_value")


class BenchmarkError(ValueError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_countries: tuple[str, ...] = DEFAULT_TRAIN_COUNTRIES
    test_countries: tuple[str, ...] = DEFAULT_TEST_COUNTRIES
    train_questions: tuple[str, ...] = DEFAULT_TRAIN_QUESTIONS
    cross_value_questions: tuple[str, ...] = DEFAULT_CROSS_VALUE_QUESTIONS
    demo_holdout_ratio: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        overlap = set(self.train_countries) & set(self.test_countries)
        if overlap:
            raise BenchmarkError(f"countries in both train and test lists: {sorted(overlap)}")
        q_overlap = set(self.train_questions) & set(self.cross_value_questions)
        if q_overlap:
            raise BenchmarkError(f"questions in both train and cross-value lists: {sorted(q_overlap)}")
        if not 0.0 <= self.demo_holdout_ratio < 1.0:
            raise BenchmarkError(f"demo_holdout_ratio must be in [0, 1): {self.demo_holdout_ratio}")


@dataclass(frozen=True)
class CorpusSample:
    sample_id: str
    split: str
    profile: DemographicProfile
    question: dict                # QuestionSpec.snapshot()
    truth_label: str
    truth_index: int
    K: int

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "split": self.split,
            "profile": self.profile.to_json(),
            "question": dict(self.question),
            "truth_label": self.truth_label,
            "truth_index": self.truth_index,
            "K": self.K,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusSample":
        return cls(
            sample_id=str(obj["sample_id"]),
            split=str(obj["split"]),
            profile=DemographicProfile.from_json(obj["profile"]),
            question=dict(obj["question"]),
            truth_label=str(obj["truth_label"]),
            truth_index=int(obj["truth_index"]),
            K=int(obj["K"]),
        )


@dataclass(frozen=True)
class CounterfactualPair:
    original: CorpusSample
    perturbed: CorpusSample
    flipped_attribute: str

    def to_json(self) -> dict:
        return {
            "original": self.original.to_json(),
            "perturbed": self.perturbed.to_json(),
            "flipped_attribute": self.flipped_attribute,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CounterfactualPair":
        return cls(
            original=CorpusSample.from_json(obj["original"]),
            perturbed=CorpusSample.from_json(obj["perturbed"]),
            flipped_attribute=str(obj["flipped_attribute"]),
        )


def profile_fingerprint(profile: DemographicProfile) -> str:
    """Stable 64-bit hex key for a profile.

    Serialization is canonical: fixed attribute order, lowercased labels,
    length-prefixed fields (so no separator collisions).
    """
    h = hashlib.blake2b(digest_size=8)
    for attr in ATTRIBUTES:
        raw = getattr(profile, attr).lower().encode("utf-8")
        h.update(len(raw).to_bytes(4, "big"))
        h.update(raw)
    return h.hexdigest()


@dataclass
class CorpusBundle:
    splits: dict[str, list[CorpusSample]]
    meta: dict = field(default_factory=dict)

    def lookup(self) -> dict[str, CorpusSample]:
        table: dict[str, CorpusSample] = {}
        for samples in self.splits.values():
            for s in samples:
                table[s.sample_id] = s
        return table


def _sample_from_record(record: ConsensusRecord, split: str, codebook: Codebook) -> CorpusSample:
    spec = codebook.question(record.question_id)
    return CorpusSample(
        sample_id=f"{profile_fingerprint(record.profile)}-{record.question_id}",
        split=split,
        profile=record.profile,
        question=spec.snapshot(),
        truth_label=record.answer_label,
        truth_index=record.answer_index,
        K=spec.K,
    )


def build_splits(
    records: Iterable[ConsensusRecord],
    spec: SplitSpec,
    codebook: Codebook,
) -> CorpusBundle:
    """Route consensus records into the four benchmark splits.

    Test-country records only ever feed cross_country: a test country's
    cross-value answers are quarantined so the three generalization axes
    stay independent. Drops are counted, never silent.
    """
    spec.validate()
    train_countries = set(spec.train_countries)
    test_countries = set(spec.test_countries)
    train_questions = set(spec.train_questions)
    cross_value_questions = set(spec.cross_value_questions)

    splits: dict[str, list[CorpusSample]] = {name: [] for name in SPLIT_NAMES}
    dropped = {"unlisted_country": 0, "unlisted_question": 0, "quarantined_test_country": 0}

    for record in records:
        country = record.profile.country
        qid = record.question_id
        if country in test_countries:
            if qid in train_questions:
                splits["cross_country"].append(_sample_from_record(record, "cross_country", codebook))
            else:
                dropped["quarantined_test_country"] += 1
            continue
        if country not in train_countries:
            dropped["unlisted_country"] += 1
            continue
        if qid in cross_value_questions:
            splits["cross_value"].append(_sample_from_record(record, "cross_value", codebook))
            continue
        if qid not in train_questions:
            dropped["unlisted_question"] += 1
            continue
        key = profile_fingerprint(record.profile)
        # Whole profiles move together: the draw depends only on (key, seed).
        held_out = stable_unit_float("demo_holdout", key, spec.seed) < spec.demo_holdout_ratio
        name = "cross_demo" if held_out else "train"
        splits[name].append(_sample_from_record(record, name, codebook))

    for name in SPLIT_NAMES:
        splits[name].sort(key=lambda s: s.sample_id)

    # Consensus extraction can't emit two records for one (profile, question),
    # but records may arrive from edited artifacts; collisions would silently
    # shadow samples in every downstream id lookup.
    seen: set[str] = set()
    for name in SPLIT_NAMES:
        for sample in splits[name]:
            if sample.sample_id in seen:
                raise BenchmarkError(f"duplicate (profile, question) record: {sample.sample_id}")
            seen.add(sample.sample_id)

    warnings = [f"split '{name}' is empty" for name in SPLIT_NAMES if not splits[name]]
    meta = {
        "counts": {name: len(splits[name]) for name in SPLIT_NAMES},
        "dropped": dropped,
        "profile_counts": {
            name: len({profile_fingerprint(s.profile) for s in splits[name]})
            for name in SPLIT_NAMES
        },
        "spec": {
            "train_countries": list(spec.train_countries),
            "test_countries": list(spec.test_countries),
            "train_questions": list(spec.train_questions),
            "cross_value_questions": list(spec.cross_value_questions),
            "demo_holdout_ratio": spec.demo_holdout_ratio,
            "seed": spec.seed,
        },
        "warnings": warnings,
    }
    return CorpusBundle(splits=splits, meta=meta)


def make_counterfactual_pairs(
    samples: Iterable[CorpusSample],
    attribute: str = "income_bracket",
    values: Sequence[str] = (INCOME_BRACKETS[0], INCOME_BRACKETS[2]),
) -> list[CounterfactualPair]:
    """Pair each sample at one attribute pole with its flipped twin.

    Default flips income Low <-> High; samples at intermediate values
    (Middle) are left out. The perturbed twin differs in exactly that
    one attribute and keeps the original truth for bookkeeping.
    """
    if len(values) != 2 or values[0] == values[1]:
        raise BenchmarkError(f"need two distinct attribute values, got {values!r}")
    if attribute not in ATTRIBUTES:
        raise BenchmarkError(f"unknown attribute: {attribute!r}")
    lo, hi = values
    pairs: list[CounterfactualPair] = []
    for sample in samples:
        current = getattr(sample.profile, attribute)
        if current == lo:
            flipped_value = hi
        elif current == hi:
            flipped_value = lo
        else:
            continue
        flipped_profile = sample.profile.replace(**{attribute: flipped_value})
        perturbed = replace(
            sample,
            sample_id=f"{profile_fingerprint(flipped_profile)}-{sample.question['id']}-cf",
            profile=flipped_profile,
        )
        pairs.append(CounterfactualPair(
            original=sample, perturbed=perturbed, flipped_attribute=attribute,
        ))
    return pairs


def split_lookup(bundles: Mapping[str, Sequence[CorpusSample]]) -> dict[str, CorpusSample]:
    table: dict[str, CorpusSample] = {}
    for samples in bundles.values():
        for s in samples:
            table[s.sample_id] = s
    return table

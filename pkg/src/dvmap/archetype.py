"""Demographic archetype extraction and entropy-based consensus filtering.

Respondents are collapsed onto an 11-attribute categorical profile, every
(profile, question) group gets a response histogram, and groups whose
Shannon entropy clears the configured bar yield one consensus record each.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .survey import ATTRIBUTES, BUCKET_LABELS, Codebook, QuestionSpec, Respondent

LIFE_STAGES: tuple[str, ...] = (
    "Adolescence",
    "Young Adulthood",
    "Middle Adulthood",
    "Late Adulthood",
    "Older Adulthood",
)
# Half-open age bins, lower bound inclusive. The last bin is unbounded.
_AGE_EDGES: tuple[int, ...] = (18, 35, 51, 65)

INCOME_BRACKETS: tuple[str, ...] = ("Low", "Middle", "High")

HAS_CHILDREN = "Has children"
HAS_NO_CHILDREN = "Has no children"


class ArchetypeError(ValueError):
    pass


@dataclass(frozen=True)
class DemographicProfile:
    """Fully discretized 11-attribute identity. Hashable, so usable as a key."""
    country: str
    gender: str
    life_stage: str
    language: str
    marital_status: str
    parenthood: str
    education: str
    occupation: str
    work_nature: str
    income_bracket: str
    religion: str

    def as_tuple(self) -> tuple[str, ...]:
        return tuple(getattr(self, a) for a in ATTRIBUTES)

    def to_json(self) -> dict:
        return {a: getattr(self, a) for a in ATTRIBUTES}

    @classmethod
    def from_json(cls, obj: dict) -> "DemographicProfile":
        return cls(**{a: str(obj[a]) for a in ATTRIBUTES})

    def replace(self, **changes: str) -> "DemographicProfile":
        fields = self.to_json()
        fields.update(changes)
        return DemographicProfile(**fields)


@dataclass(frozen=True)
class Histogram:
    """Counts over a question's K processed options, index-aligned to labels."""
    counts: tuple[float, ...]

    @property
    def total(self) -> float:
        return sum(self.counts)

    def probabilities(self) -> tuple[float, ...]:
        total = self.total
        if total <= 0:
            raise ArchetypeError("histogram has no mass")
        return tuple(c / total for c in self.counts)


def discretize_age(age_years: int) -> str:
    """Map an age in years onto one of five life stages."""
    if age_years < 0:
        raise ArchetypeError(f"negative age: {age_years}")
    for edge, label in zip(_AGE_EDGES, LIFE_STAGES):
        if age_years < edge:
            return label
    return LIFE_STAGES[-1]


def discretize_income(step: int) -> str:
    """Collapse the 10-step household income scale to three brackets."""
    if not 1 <= step <= 10:
        raise ArchetypeError(f"income step out of range: {step}")
    if step <= 3:
        return INCOME_BRACKETS[0]
    if step <= 7:
        return INCOME_BRACKETS[1]
    return INCOME_BRACKETS[2]


def discretize_parenthood(n_children: int) -> str:
    if n_children < 0:
        raise ArchetypeError(f"negative child count: {n_children}")
    return HAS_CHILDREN if n_children >= 1 else HAS_NO_CHILDREN


def discretize_response(question: QuestionSpec, code: int) -> str:
    """Map a raw answer code to its processed option label.

    10-point scales bucket as 1-3 / 4-7 / 8-10; shorter scales map onto
    their labels positionally.
    """
    lo, hi = question.raw_range
    if not lo <= code <= hi:
        raise ArchetypeError(f"{question.id}: code {code} outside range [{lo}, {hi}]")
    if question.is_bucketed:
        if code <= 3:
            return BUCKET_LABELS[0]
        if code <= 7:
            return BUCKET_LABELS[1]
        return BUCKET_LABELS[2]
    return question.options[code - lo]


def derive_profile(respondent: Respondent, codebook: Codebook) -> DemographicProfile | None:
    """Discretize a respondent's raw codes into a profile.

    Returns None when any of the 11 attributes is missing; callers count
    those rejections rather than guessing values.
    """
    if respondent.country is None:
        return None
    values: dict[str, str] = {"country": respondent.country}
    for var in codebook.demographics:
        if var.attribute == "country":
            continue
        code = respondent.demographics.get(var.attribute)
        if code is None:
            return None
        if var.kind == "age_years":
            values["life_stage"] = discretize_age(code)
        elif var.kind == "income_step":
            values["income_bracket"] = discretize_income(code)
        elif var.kind == "children_count":
            values["parenthood"] = discretize_parenthood(code)
        else:
            assert var.codes is not None
            values[var.attribute] = var.codes[code]
    return DemographicProfile(**values)


def shannon_entropy(histogram: Histogram) -> float:
    """Shannon entropy in nats; zero-count bins contribute nothing."""
    entropy = 0.0
    for p in histogram.probabilities():
        if p > 0.0:
            entropy -= p * math.log(p)
    return entropy


@dataclass(frozen=True)
class ConsensusRecord:
    profile: DemographicProfile
    question_id: str
    answer_label: str
    answer_index: int
    support: int

    def to_json(self) -> dict:
        return {
            "profile": self.profile.to_json(),
            "question_id": self.question_id,
            "answer_label": self.answer_label,
            "answer_index": self.answer_index,
            "support": self.support,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ConsensusRecord":
        return cls(
            profile=DemographicProfile.from_json(obj["profile"]),
            question_id=str(obj["question_id"]),
            answer_label=str(obj["answer_label"]),
            answer_index=int(obj["answer_index"]),
            support=int(obj["support"]),
        )


@dataclass
class FilterStats:
    total_pairs: int = 0
    retained: int = 0
    rejected_respondents: int = 0
    # Overlap is reported against both denominators since either reading
    # of "sharing a profile" is defensible.
    overlapping_respondent_fraction: float = 0.0
    overlapping_pair_fraction: float = 0.0
    discarded_fraction: float = 0.0
    tie_groups: int = 0

    def to_json(self) -> dict:
        return {
            "total_pairs": self.total_pairs,
            "retained": self.retained,
            "rejected_respondents": self.rejected_respondents,
            "overlapping_respondent_fraction": self.overlapping_respondent_fraction,
            "overlapping_pair_fraction": self.overlapping_pair_fraction,
            "discarded_fraction": self.discarded_fraction,
            "tie_groups": self.tie_groups,
        }


def _group_answers(
    respondents: Iterable[Respondent],
    codebook: Codebook,
) -> tuple[dict[DemographicProfile, dict[str, list[int]]], int, dict[DemographicProfile, int]]:
    """Group discretized answer indices by (profile, question).

    Also returns the count of respondents rejected for incomplete
    demographics and the respondent count per profile.
    """
    groups: dict[DemographicProfile, dict[str, list[int]]] = defaultdict(dict)
    members: dict[DemographicProfile, int] = defaultdict(int)
    rejected = 0
    for resp in respondents:
        profile = derive_profile(resp, codebook)
        if profile is None:
            rejected += 1
            continue
        members[profile] += 1
        buckets = groups[profile]
        for qid, code in resp.answers.items():
            spec = codebook.questions.get(qid)
            if spec is None:
                continue
            label = discretize_response(spec, code)
            buckets.setdefault(qid, []).append(spec.options.index(label))
    return groups, rejected, members


def group_histograms(
    respondents: Iterable[Respondent],
    codebook: Codebook,
) -> Iterator[tuple[DemographicProfile, str, Histogram]]:
    """Yield the response histogram of every (profile, question) group."""
    groups, _, _ = _group_answers(respondents, codebook)
    for profile in groups:
        for qid, indices in groups[profile].items():
            k = codebook.questions[qid].K
            counts = [0.0] * k
            for idx in indices:
                counts[idx] += 1.0
            yield profile, qid, Histogram(tuple(counts))


def extract_consensus(
    respondents: Iterable[Respondent],
    codebook: Codebook,
    threshold: str = "strict",
) -> tuple[list[ConsensusRecord], FilterStats]:
    """Keep (profile, question) groups that reach consensus.

    strict: unanimity only (entropy exactly zero).
    relaxed: modal answer for every group, ties broken toward the lowest
    option index and counted in the stats.
    """
    if threshold not in ("strict", "relaxed"):
        raise ArchetypeError(f"unknown threshold: {threshold!r}")

    groups, rejected, members = _group_answers(respondents, codebook)
    stats = FilterStats(rejected_respondents=rejected)

    total_respondents = sum(members.values())
    overlapping = sum(n for n in members.values() if n >= 2)
    if total_respondents:
        stats.overlapping_respondent_fraction = overlapping / total_respondents

    records: list[ConsensusRecord] = []
    overlapping_pairs = 0
    for profile in groups:
        shared_profile = members[profile] >= 2
        for qid, indices in sorted(groups[profile].items()):
            stats.total_pairs += 1
            if shared_profile:
                overlapping_pairs += 1
            spec = codebook.questions[qid]
            counts = [0] * spec.K
            for idx in indices:
                counts[idx] += 1
            if threshold == "strict":
                hist = Histogram(tuple(float(c) for c in counts))
                if shannon_entropy(hist) != 0.0:
                    continue
                winner = next(i for i, c in enumerate(counts) if c > 0)
            else:
                best = max(counts)
                if counts.count(best) > 1:
                    stats.tie_groups += 1
                winner = counts.index(best)  # lowest index wins ties
            records.append(ConsensusRecord(
                profile=profile,
                question_id=qid,
                answer_label=spec.options[winner],
                answer_index=winner,
                support=len(indices),
            ))
            stats.retained += 1

    if stats.total_pairs:
        stats.overlapping_pair_fraction = overlapping_pairs / stats.total_pairs
        stats.discarded_fraction = 1.0 - stats.retained / stats.total_pairs

    records.sort(key=lambda r: (r.profile.as_tuple(), r.question_id))
    return records, stats


def entropy_summary(
    respondents: Sequence[Respondent],
    codebook: Codebook,
    bins: int = 24,
) -> dict:
    """Entropy landscape of the corpus, for reporting.

    Covers both granularities: per (profile, question) group and per
    (country, question) pooled response distribution.
    """
    group_entropies: list[float] = []
    max_k = 2
    for _, qid, hist in group_histograms(respondents, codebook):
        group_entropies.append(shannon_entropy(hist))
        max_k = max(max_k, codebook.questions[qid].K)

    country_q: dict[str, dict[str, list[float]]] = defaultdict(dict)
    for resp in respondents:
        if resp.country is None:
            continue
        for qid, code in resp.answers.items():
            spec = codebook.questions.get(qid)
            if spec is None:
                continue
            counts = country_q[resp.country].setdefault(qid, [0.0] * spec.K)
            label = discretize_response(spec, code)
            counts[spec.options.index(label)] += 1.0

    hi = math.log(max_k)
    edges = [hi * i / bins for i in range(bins + 1)]
    hist_counts = [0] * bins
    for h in group_entropies:
        slot = min(int(h / hi * bins) if hi > 0 else 0, bins - 1)
        hist_counts[slot] += 1

    per_country = {
        country: {
            qid: shannon_entropy(Histogram(tuple(counts)))
            for qid, counts in sorted(qmap.items())
        }
        for country, qmap in sorted(country_q.items())
    }
    return {
        "group_entropy_histogram": {"bin_edges": edges, "counts": hist_counts},
        "n_groups": len(group_entropies),
        "zero_entropy_fraction": (
            sum(1 for h in group_entropies if h == 0.0) / len(group_entropies)
            if group_entropies else 0.0
        ),
        "per_country_question_entropy": per_country,
    }

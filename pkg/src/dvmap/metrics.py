"""Evaluation metrics and report aggregation.

Accuracy counts unparsed output as wrong; Likert consistency excludes it
(and is defined only for ordinal scales); the distribution distance is
the sum of absolute CDF gaps, computed per (country, question) group and
averaged unweighted.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .archetype import Histogram, shannon_entropy
from .benchmark import CorpusSample, CounterfactualPair
from .prompt import ParseResult


class MetricError(ValueError):
    pass


def _normalize(hist: Histogram | Sequence[float]) -> list[float]:
    counts = list(hist.counts) if isinstance(hist, Histogram) else [float(c) for c in hist]
    if not counts:
        raise MetricError("empty histogram")
    if any(c < 0 for c in counts):
        raise MetricError("negative histogram count")
    total = sum(counts)
    if total <= 0:
        raise MetricError("histogram has no mass")
    return [c / total for c in counts]


def accuracy(
    preds: Mapping[str, ParseResult],
    corpus: Mapping[str, CorpusSample],
) -> float:
    """Exact-match rate over all predictions; format errors score zero."""
    if not preds:
        raise MetricError("no predictions")
    hits = 0
    for sample_id, parse in preds.items():
        sample = _lookup(corpus, sample_id)
        if parse.ok and parse.index == sample.truth_index:
            hits += 1
    return hits / len(preds)


def likert_consistency(
    preds: Mapping[str, ParseResult],
    corpus: Mapping[str, CorpusSample],
) -> float:
    """Mean 1 - |pred - truth| / (K - 1) over parsed ordinal predictions.

    Indices are 0-based positions on the processed scale; unparsed
    predictions are excluded from the denominator.
    """
    if not preds:
        raise MetricError("no predictions")
    total = 0.0
    n = 0
    for sample_id, parse in preds.items():
        sample = _lookup(corpus, sample_id)
        if sample.question["kind"] != "ordinal":
            raise MetricError(f"Likert consistency undefined for nominal question {sample.question['id']}")
        if sample.K < 2:
            raise MetricError(f"question {sample.question['id']} has K < 2")
        if not parse.ok:
            continue
        assert parse.index is not None
        total += 1.0 - abs(parse.index - sample.truth_index) / (sample.K - 1)
        n += 1
    if n == 0:
        raise MetricError("no parsed predictions")
    return total / n


def wasserstein(pred_hist: Histogram | Sequence[float], real_hist: Histogram | Sequence[float]) -> float:
    """Sum of absolute CDF differences between two option distributions."""
    p = _normalize(pred_hist)
    q = _normalize(real_hist)
    if len(p) != len(q):
        raise MetricError(f"histogram length mismatch: {len(p)} vs {len(q)}")
    cp = cq = 0.0
    distance = 0.0
    for a, b in zip(p, q):
        cp += a
        cq += b
        distance += abs(cp - cq)
    return distance


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    if len(xs) != len(ys):
        raise MetricError(f"length mismatch: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise MetricError("need at least two points")
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    dx = [x - mx for x in xs]
    dy = [y - my for y in ys]
    sx = math.sqrt(sum(d * d for d in dx))
    sy = math.sqrt(sum(d * d for d in dy))
    if sx == 0.0 or sy == 0.0:
        raise MetricError("zero variance input")
    return sum(a * b for a, b in zip(dx, dy)) / (sx * sy)


@dataclass
class FlipRateResult:
    n_pairs: int
    scored: int
    excluded: int
    rate: float
    per_concept: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "scored": self.scored,
            "excluded": self.excluded,
            "rate": self.rate,
            "per_concept": self.per_concept,
        }


def flip_rate(
    pairs: Iterable[CounterfactualPair],
    preds: Mapping[str, ParseResult],
) -> FlipRateResult:
    """Fraction of counterfactual pairs whose two answers differ.

    A pair with an unparsed side cannot witness stability or a flip, so it
    leaves the denominator and is counted as excluded.
    """
    n_pairs = scored = excluded = flips = 0
    concept_counts: dict[str, list[int]] = defaultdict(lambda: [0, 0])  # [flips, scored]
    for pair in pairs:
        n_pairs += 1
        po = preds.get(pair.original.sample_id)
        pp = preds.get(pair.perturbed.sample_id)
        if po is None or pp is None:
            raise MetricError(f"missing prediction for pair {pair.original.sample_id}")
        if not (po.ok and pp.ok):
            excluded += 1
            continue
        scored += 1
        concept = pair.original.question["concept"]
        concept_counts[concept][1] += 1
        if po.label != pp.label:
            flips += 1
            concept_counts[concept][0] += 1
    if n_pairs == 0:
        raise MetricError("no counterfactual pairs")
    if scored == 0:
        raise MetricError("every pair had an unparsed side")
    per_concept = {
        concept: {"rate": f / s, "scored": s}
        for concept, (f, s) in sorted(concept_counts.items())
    }
    return FlipRateResult(
        n_pairs=n_pairs, scored=scored, excluded=excluded,
        rate=flips / scored, per_concept=per_concept,
    )


@dataclass
class EvalReport:
    n: int
    accuracy: float
    likert_consistency: float | None
    wasserstein_mean: float | None
    unparsed_fraction: float
    skipped_groups: int
    per_country: dict[str, dict]
    per_question: dict[str, dict]
    per_country_question: dict[str, dict] | None = None
    entropy_accuracy_r: float | None = None
    # Aggregation choices are part of the result so alternates compare fairly.
    wd_grouping: str = "country_question"
    wd_population: str = "parsed"

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "likert_consistency": self.likert_consistency,
            "wasserstein_mean": self.wasserstein_mean,
            "unparsed_fraction": self.unparsed_fraction,
            "skipped_groups": self.skipped_groups,
            "per_country": self.per_country,
            "per_question": self.per_question,
            "per_country_question": self.per_country_question,
            "entropy_accuracy_r": self.entropy_accuracy_r,
            "wd_grouping": self.wd_grouping,
            "wd_population": self.wd_population,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(**{k: obj[k] for k in (
            "n", "accuracy", "likert_consistency", "wasserstein_mean",
            "unparsed_fraction", "skipped_groups", "per_country", "per_question",
            "per_country_question", "entropy_accuracy_r", "wd_grouping", "wd_population",
        )})


def _lookup(corpus: Mapping[str, CorpusSample], sample_id: str) -> CorpusSample:
    try:
        return corpus[sample_id]
    except KeyError:
        raise MetricError(f"prediction for unknown sample: {sample_id}") from None


def _cell(items: list[tuple[ParseResult, CorpusSample]]) -> dict:
    """Metrics for one group of (parse, sample) items."""
    n = len(items)
    hits = sum(1 for p, s in items if p.ok and p.index == s.truth_index)
    unparsed = sum(1 for p, _ in items if not p.ok)
    lc_vals = [
        1.0 - abs(p.index - s.truth_index) / (s.K - 1)
        for p, s in items
        if p.ok and s.question["kind"] == "ordinal" and s.K >= 2
    ]
    return {
        "n": n,
        "accuracy": hits / n,
        "likert_consistency": (sum(lc_vals) / len(lc_vals)) if lc_vals else None,
        "unparsed_fraction": unparsed / n,
    }


def _group_wd(items: list[tuple[ParseResult, CorpusSample]]) -> float | None:
    """Distribution distance of one group over its parsed subset."""
    parsed = [(p, s) for p, s in items if p.ok]
    if not parsed:
        return None
    k = parsed[0][1].K
    pred_counts = [0.0] * k
    real_counts = [0.0] * k
    for p, s in parsed:
        pred_counts[p.index] += 1.0
        real_counts[s.truth_index] += 1.0
    return wasserstein(pred_counts, real_counts)


def aggregate_report(
    preds: Mapping[str, ParseResult],
    corpus: Mapping[str, CorpusSample],
    groupings: Sequence[str] = ("country", "question"),
) -> EvalReport:
    """Assemble the full evaluation report for one prediction set."""
    allowed = {"country", "question", "country_question"}
    bad = set(groupings) - allowed
    if bad:
        raise MetricError(f"unknown grouping(s): {sorted(bad)}")
    if not preds:
        raise MetricError("no predictions")

    items: list[tuple[ParseResult, CorpusSample]] = []
    for sample_id, parse in preds.items():
        items.append((parse, _lookup(corpus, sample_id)))
    items.sort(key=lambda it: it[1].sample_id)

    by_country: dict[str, list] = defaultdict(list)
    by_question: dict[str, list] = defaultdict(list)
    by_cq: dict[tuple[str, str], list] = defaultdict(list)
    for parse, sample in items:
        by_country[sample.profile.country].append((parse, sample))
        by_question[sample.question["id"]].append((parse, sample))
        by_cq[(sample.profile.country, sample.question["id"])].append((parse, sample))

    wd_values = []
    skipped = 0
    for key in sorted(by_cq):
        wd = _group_wd(by_cq[key])
        if wd is None:
            skipped += 1
        else:
            wd_values.append(wd)

    n = len(items)
    hits = sum(1 for p, s in items if p.ok and p.index == s.truth_index)
    unparsed = sum(1 for p, _ in items if not p.ok)
    lc_vals = [
        1.0 - abs(p.index - s.truth_index) / (s.K - 1)
        for p, s in items
        if p.ok and s.question["kind"] == "ordinal" and s.K >= 2
    ]

    per_question = {qid: _cell(group) for qid, group in sorted(by_question.items())}

    # Entropy of each question's truth distribution vs its accuracy: the
    # consensus-difficulty relationship, when there is enough spread.
    r = None
    if len(per_question) >= 2:
        entropies = []
        accs = []
        for qid, group in sorted(by_question.items()):
            k = group[0][1].K
            counts = [0.0] * k
            for _, s in group:
                counts[s.truth_index] += 1.0
            entropies.append(shannon_entropy(Histogram(tuple(counts))))
            accs.append(per_question[qid]["accuracy"])
        try:
            r = pearson(entropies, accs)
        except MetricError:
            r = None

    return EvalReport(
        n=n,
        accuracy=hits / n,
        likert_consistency=(sum(lc_vals) / len(lc_vals)) if lc_vals else None,
        wasserstein_mean=(sum(wd_values) / len(wd_values)) if wd_values else None,
        unparsed_fraction=unparsed / n,
        skipped_groups=skipped,
        per_country={c: _cell(g) for c, g in sorted(by_country.items())} if "country" in groupings else {},
        per_question=per_question if "question" in groupings else {},
        per_country_question=(
            {f"{c}/{q}": _cell(g) for (c, q), g in sorted(by_cq.items())}
            if "country_question" in groupings else None
        ),
        entropy_accuracy_r=r,
    )

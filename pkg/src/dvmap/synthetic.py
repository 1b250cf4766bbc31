"""Synthetic survey generator with a planted profile-to-answer mapping.

Distinct derived profiles get deterministic planted answers; respondents
materialize raw codes that discretize back onto the planted label, so
with zero noise every (profile, question) group is unanimous by
construction. Noise replaces individual answers with uniform raw codes.
"""
from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .archetype import (
    HAS_CHILDREN,
    HAS_NO_CHILDREN,
    INCOME_BRACKETS,
    LIFE_STAGES,
    DemographicProfile,
)
from .artifacts import stable_u64
from .survey import ATTRIBUTES, Codebook, is_valid_iso3

# Raw-code sampling ranges per derived bin.
_AGE_RANGES = {
    "Adolescence": (12, 17),
    "Young Adulthood": (18, 34),
    "Middle Adulthood": (35, 50),
    "Late Adulthood": (51, 64),
    "Older Adulthood": (65, 90),
}
_INCOME_RANGES = {"Low": (1, 3), "Middle": (4, 7), "High": (8, 10)}
_BUCKET_RANGES = ((1, 3), (4, 7), (8, 10))   # 10-point response buckets


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    countries: tuple[str, ...]
    questions: tuple[str, ...]
    n_profiles: int = 50
    respondents_per_profile: int = 4
    noise: float = 0.0
    planted_attributes: tuple[str, ...] | None = None   # None: full profile
    determined_by: dict = field(default_factory=dict)   # question id -> attribute

    def validate(self, codebook: Codebook) -> None:
        problems = []
        if not self.countries:
            problems.append("countries must be non-empty")
        for c in self.countries:
            if not is_valid_iso3(c):
                problems.append(f"not an ISO-3 code: {c!r}")
        if not self.questions:
            problems.append("questions must be non-empty")
        for q in self.questions:
            if q not in codebook.questions:
                problems.append(f"unknown question id: {q}")
        if self.n_profiles < 1:
            problems.append("n_profiles must be >= 1")
        if self.respondents_per_profile < 1:
            problems.append("respondents_per_profile must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            problems.append(f"noise must be in [0, 1]: {self.noise}")
        if self.planted_attributes is not None:
            for a in self.planted_attributes:
                if a not in ATTRIBUTES:
                    problems.append(f"unknown planted attribute: {a}")
        for qid, attr in self.determined_by.items():
            if qid not in self.questions:
                problems.append(f"determined_by references unplanted question: {qid}")
            if attr not in ATTRIBUTES:
                problems.append(f"determined_by references unknown attribute: {attr}")
        if problems:
            raise SyntheticSpecError("invalid synthetic spec:\n  " + "\n  ".join(problems))

    @classmethod
    def from_config(cls, obj: dict) -> "SyntheticSpec":
        known = {"countries", "questions", "n_profiles", "respondents_per_profile",
                 "noise", "planted_attributes", "determined_by"}
        unknown = set(obj) - known
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic key(s): {', '.join(sorted(unknown))}")
        if "countries" not in obj or "questions" not in obj:
            raise SyntheticSpecError("synthetic spec needs 'countries' and 'questions'")
        return cls(
            countries=tuple(obj["countries"]),
            questions=tuple(obj["questions"]),
            n_profiles=int(obj.get("n_profiles", 50)),
            respondents_per_profile=int(obj.get("respondents_per_profile", 4)),
            noise=float(obj.get("noise", 0.0)),
            planted_attributes=(tuple(obj["planted_attributes"])
                                if obj.get("planted_attributes") is not None else None),
            determined_by=dict(obj.get("determined_by", {})),
        )

    def to_json(self) -> dict:
        return {
            "countries": list(self.countries),
            "questions": list(self.questions),
            "n_profiles": self.n_profiles,
            "respondents_per_profile": self.respondents_per_profile,
            "noise": self.noise,
            "planted_attributes": (list(self.planted_attributes)
                                   if self.planted_attributes is not None else None),
            "determined_by": dict(self.determined_by),
        }


def _attribute_pools(codebook: Codebook, countries: Sequence[str]) -> dict[str, list[str]]:
    pools: dict[str, list[str]] = {
        "country": list(countries),
        "life_stage": list(LIFE_STAGES),
        "income_bracket": list(INCOME_BRACKETS),
        "parenthood": [HAS_NO_CHILDREN, HAS_CHILDREN],
    }
    for var in codebook.demographics:
        if var.codes is not None:
            pools[var.attribute] = [var.codes[c] for c in sorted(var.codes)]
    return pools


def planted_answer_index(
    spec: SyntheticSpec,
    codebook: Codebook,
    seed: int,
    profile: DemographicProfile,
    qid: str,
) -> int:
    """The deterministic answer this profile holds for this question."""
    attr = spec.determined_by.get(qid)
    if attr is not None:
        material: tuple[str, ...] = (getattr(profile, attr),)
    elif spec.planted_attributes is not None:
        material = tuple(getattr(profile, a) for a in spec.planted_attributes)
    else:
        material = profile.as_tuple()
    k = codebook.questions[qid].K
    return stable_u64("planted_answer", seed, qid, *material) % k


def planted_profiles(
    spec: SyntheticSpec,
    codebook: Codebook,
    seed: int,
) -> list[DemographicProfile]:
    """Draw n distinct derived profiles; distinctness is enforced after
    discretization so no two planted groups can merge."""
    rng = random.Random(stable_u64("profiles", seed))
    pools = _attribute_pools(codebook, spec.countries)
    profiles: list[DemographicProfile] = []
    seen: set[tuple[str, ...]] = set()
    attempts = 0
    while len(profiles) < spec.n_profiles:
        attempts += 1
        if attempts > 200 * spec.n_profiles + 1000:
            raise SyntheticSpecError(
                f"could not draw {spec.n_profiles} distinct profiles; attribute space too small")
        profile = DemographicProfile(**{a: rng.choice(pools[a]) for a in ATTRIBUTES})
        key = profile.as_tuple()
        if key not in seen:
            seen.add(key)
            profiles.append(profile)
    return profiles


def generate_synthetic(
    spec: SyntheticSpec,
    codebook: Codebook,
    seed: int,
) -> tuple[list[str], list[list[str]]]:
    """Produce (header, rows) of raw survey CSV cells."""
    spec.validate(codebook)
    profiles = planted_profiles(spec, codebook, seed)
    rng = random.Random(stable_u64("rows", seed))

    label_to_code = {
        var.attribute: {label: code for code, label in var.codes.items()}
        for var in codebook.demographics if var.codes is not None
    }
    header = [var.id for var in codebook.demographics] + list(spec.questions)
    rows: list[list[str]] = []
    for profile in profiles:
        planted = {
            qid: planted_answer_index(spec, codebook, seed, profile, qid)
            for qid in spec.questions
        }
        for _ in range(spec.respondents_per_profile):
            cells: list[str] = []
            for var in codebook.demographics:
                value = getattr(profile, var.attribute)
                if var.kind == "country":
                    cells.append(value)
                elif var.kind == "age_years":
                    cells.append(str(rng.randint(*_AGE_RANGES[value])))
                elif var.kind == "income_step":
                    cells.append(str(rng.randint(*_INCOME_RANGES[value])))
                elif var.kind == "children_count":
                    cells.append(str(rng.randint(1, 4) if value == HAS_CHILDREN else 0))
                else:
                    cells.append(str(label_to_code[var.attribute][value]))
            for qid in spec.questions:
                q = codebook.questions[qid]
                lo, hi = q.raw_range
                if rng.random() < spec.noise:
                    code = rng.randint(lo, hi)
                elif q.is_bucketed:
                    code = rng.randint(*_BUCKET_RANGES[planted[qid]])
                else:
                    code = lo + planted[qid]
                cells.append(str(code))
            rows.append(cells)
    return header, rows


def write_survey_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)

"""Survey codebook loading and raw microdata parsing.

The codebook is data, not code: question wording, scale ranges, option
labels, and the demographic variable map all come from a JSON file. A
default codebook covering the standard question set ships as a package
resource.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .artifacts import read_json

# Canonical profile attribute order. Fingerprints, prompts, and feature
# matrices all rely on this exact order, so it is defined once here.
ATTRIBUTES: tuple[str, ...] = (
    "country",
    "gender",
    "life_stage",
    "language",
    "marital_status",
    "parenthood",
    "education",
    "occupation",
    "work_nature",
    "income_bracket",
    "religion",
)

# Labels for 10-point scales after bucketing. Distinct from the income
# bracket labels (Low/Middle/High) on purpose.
BUCKET_LABELS: tuple[str, ...] = ("Low", "Medium", "High")

_ISO3_RE = re.compile(r"^[A-Z]{3}$")

# Demographic variable kinds that carry their own decoding rule instead of
# a categorical code table.
_SPECIAL_KINDS = {
    "country": "country",
    "life_stage": "age_years",
    "parenthood": "children_count",
    "income_bracket": "income_step",
}

_AGE_MAX = 120
_CHILDREN_MAX = 24


class CodebookError(ValueError):
    """Raised when a codebook file fails validation; message lists every problem."""


class SurveyFormatError(ValueError):
    """Raised when a survey CSV violates the coded-column contract."""


@dataclass(frozen=True)
class QuestionSpec:
    id: str
    text: str
    concept: str
    kind: str                     # "ordinal" or "nominal"
    raw_range: tuple[int, int]    # inclusive raw code range
    options: tuple[str, ...]      # labels after bucketing, length == K

    @property
    def K(self) -> int:
        return len(self.options)

    @property
    def raw_size(self) -> int:
        return self.raw_range[1] - self.raw_range[0] + 1

    @property
    def is_bucketed(self) -> bool:
        return self.raw_size == 10

    def snapshot(self) -> dict:
        """Self-contained dict for embedding in benchmark samples."""
        return {
            "id": self.id,
            "text": self.text,
            "concept": self.concept,
            "kind": self.kind,
            "options": list(self.options),
            "K": self.K,
        }


@dataclass(frozen=True)
class DemographicVar:
    id: str
    attribute: str
    kind: str
    codes: Mapping[int, str] | None = None


@dataclass(frozen=True)
class Codebook:
    questions: Mapping[str, QuestionSpec]       # insertion order == file order
    demographics: tuple[DemographicVar, ...]    # one per canonical attribute
    missing_codes: frozenset[int]

    def question(self, qid: str) -> QuestionSpec:
        try:
            return self.questions[qid]
        except KeyError:
            raise KeyError(f"unknown question id: {qid}") from None

    def demographic_for(self, attribute: str) -> DemographicVar:
        for var in self.demographics:
            if var.attribute == attribute:
                return var
        raise KeyError(f"unknown demographic attribute: {attribute}")

    def is_missing(self, code: int) -> bool:
        # Negative WVS codes are sentinel values; extra codes come from config.
        return code < 0 or code in self.missing_codes


@dataclass
class Respondent:
    """One survey row with raw codes; missing values are simply absent."""
    row_index: int
    country: str | None
    demographics: dict[str, int] = field(default_factory=dict)  # attribute -> raw code
    answers: dict[str, int] = field(default_factory=dict)       # question id -> raw code

    def to_json(self) -> dict:
        return {
            "row_index": self.row_index,
            "country": self.country,
            "demographics": dict(self.demographics),
            "answers": dict(self.answers),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Respondent":
        return cls(
            row_index=int(obj["row_index"]),
            country=obj.get("country"),
            demographics={k: int(v) for k, v in obj.get("demographics", {}).items()},
            answers={k: int(v) for k, v in obj.get("answers", {}).items()},
        )


@dataclass
class IngestStats:
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped: int = 0
    rows_missing_demographics: int = 0
    out_of_range_coerced: int = 0

    def to_json(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "rows_dropped": self.rows_dropped,
            "rows_missing_demographics": self.rows_missing_demographics,
            "out_of_range_coerced": self.out_of_range_coerced,
        }


def default_codebook_path() -> Path:
    return Path(str(resources.files("dvmap").joinpath("resources/codebook.json")))


def load_codebook(path: str | Path | None = None) -> Codebook:
    """Load and validate a codebook JSON file; None loads the shipped default.

    All validation problems are collected and reported in one error.
    """
    raw = read_json(path if path is not None else default_codebook_path())
    problems: list[str] = []

    if not isinstance(raw, dict):
        raise CodebookError("codebook root must be a JSON object")
    unknown = set(raw) - {"questions", "demographics", "missing_codes"}
    for key in sorted(unknown):
        problems.append(f"unknown top-level key: {key!r}")

    questions: dict[str, QuestionSpec] = {}
    for i, entry in enumerate(raw.get("questions", [])):
        spec = _parse_question(entry, i, problems)
        if spec is None:
            continue
        if spec.id in questions:
            problems.append(f"duplicate question id: {spec.id}")
        else:
            questions[spec.id] = spec
    if not questions and not problems:
        problems.append("codebook defines no questions")

    demographics: list[DemographicVar] = []
    seen_attrs: set[str] = set()
    seen_ids: set[str] = set()
    for i, entry in enumerate(raw.get("demographics", [])):
        var = _parse_demographic(entry, i, problems)
        if var is None:
            continue
        if var.attribute in seen_attrs:
            problems.append(f"duplicate demographic attribute: {var.attribute}")
            continue
        if var.id in seen_ids:
            problems.append(f"duplicate demographic variable id: {var.id}")
            continue
        seen_attrs.add(var.attribute)
        seen_ids.add(var.id)
        demographics.append(var)
    for attr in ATTRIBUTES:
        if attr not in seen_attrs:
            problems.append(f"demographics section is missing attribute: {attr}")

    missing_codes: set[int] = set()
    for code in raw.get("missing_codes", []):
        if not isinstance(code, int):
            problems.append(f"missing_codes entries must be integers, got {code!r}")
        else:
            missing_codes.add(code)

    if problems:
        raise CodebookError("invalid codebook:\n  " + "\n  ".join(problems))

    demographics.sort(key=lambda v: ATTRIBUTES.index(v.attribute))
    return Codebook(
        questions=questions,
        demographics=tuple(demographics),
        missing_codes=frozenset(missing_codes),
    )


def _parse_question(entry: object, index: int, problems: list[str]) -> QuestionSpec | None:
    where = f"questions[{index}]"
    if not isinstance(entry, dict):
        problems.append(f"{where}: must be an object")
        return None
    qid = entry.get("id")
    if not isinstance(qid, str) or not qid:
        problems.append(f"{where}: missing or empty id")
        return None
    where = f"question {qid}"
    ok = True

    text = entry.get("text")
    if not isinstance(text, str) or not text.strip():
        problems.append(f"{where}: missing text")
        ok = False
    concept = entry.get("concept")
    if not isinstance(concept, str) or not concept:
        problems.append(f"{where}: missing concept")
        ok = False
    kind = entry.get("kind")
    if kind not in ("ordinal", "nominal"):
        problems.append(f"{where}: kind must be 'ordinal' or 'nominal', got {kind!r}")
        ok = False

    rng = entry.get("range")
    lo = hi = 0
    if (not isinstance(rng, (list, tuple)) or len(rng) != 2
            or not all(isinstance(v, int) for v in rng)):
        problems.append(f"{where}: range must be a pair of integers")
        ok = False
    else:
        lo, hi = int(rng[0]), int(rng[1])
        if lo < 0 or hi < lo:
            problems.append(f"{where}: malformed range [{lo}, {hi}]")
            ok = False
    size = hi - lo + 1

    options = entry.get("options")
    if ok and size == 10:
        # 10-point scales are bucketed; labels are fixed.
        if options is not None and tuple(options) != BUCKET_LABELS:
            problems.append(f"{where}: 10-point scales use the fixed bucket labels {list(BUCKET_LABELS)}")
            ok = False
        options = list(BUCKET_LABELS)
    elif ok:
        if size < 2 or size > 5:
            problems.append(f"{where}: scale size {size} unsupported (need 2-5 or exactly 10)")
            ok = False
        if not isinstance(options, list) or not options:
            problems.append(f"{where}: empty or missing option list")
            ok = False
        elif len(options) != size:
            problems.append(f"{where}: {len(options)} options for a {size}-point scale")
            ok = False
        elif any(not isinstance(o, str) or not o.strip() for o in options):
            problems.append(f"{where}: option labels must be non-empty strings")
            ok = False
    if ok:
        # parse_answer matches labels after trimming and case folding, so
        # labels must stay distinct under that normalization.
        normalized = [o.strip().lower() for o in options]
        if len(set(normalized)) != len(normalized):
            problems.append(f"{where}: option labels collide after trim/casefold")
            ok = False
    if not ok:
        return None
    return QuestionSpec(
        id=qid, text=text.strip(), concept=concept, kind=kind,
        raw_range=(lo, hi), options=tuple(options),
    )


def _parse_demographic(entry: object, index: int, problems: list[str]) -> DemographicVar | None:
    where = f"demographics[{index}]"
    if not isinstance(entry, dict):
        problems.append(f"{where}: must be an object")
        return None
    var_id = entry.get("id")
    attr = entry.get("attribute")
    kind = entry.get("kind")
    if not isinstance(var_id, str) or not var_id:
        problems.append(f"{where}: missing id")
        return None
    where = f"demographic {var_id}"
    if attr not in ATTRIBUTES:
        problems.append(f"{where}: unknown attribute {attr!r}")
        return None

    expected_kind = _SPECIAL_KINDS.get(attr, "categorical")
    if kind != expected_kind:
        problems.append(f"{where}: attribute {attr} requires kind {expected_kind!r}, got {kind!r}")
        return None

    codes: dict[int, str] | None = None
    if kind == "categorical":
        raw_codes = entry.get("codes")
        if not isinstance(raw_codes, dict) or not raw_codes:
            problems.append(f"{where}: categorical variable needs a non-empty codes map")
            return None
        codes = {}
        for k, v in raw_codes.items():
            try:
                code = int(k)
            except (TypeError, ValueError):
                problems.append(f"{where}: non-integer code {k!r}")
                return None
            if not isinstance(v, str) or not v.strip():
                problems.append(f"{where}: empty label for code {k}")
                return None
            if code < 0:
                problems.append(f"{where}: negative codes are reserved for missing values")
                return None
            codes[code] = v
        if len(set(codes.values())) != len(codes):
            problems.append(f"{where}: duplicate labels in codes map")
            return None
    return DemographicVar(id=var_id, attribute=attr, kind=kind, codes=codes)


def is_valid_iso3(value: str) -> bool:
    return bool(_ISO3_RE.match(value))


def _demographic_code_valid(var: DemographicVar, code: int) -> bool:
    if var.kind == "age_years":
        return 0 <= code <= _AGE_MAX
    if var.kind == "children_count":
        return 0 <= code <= _CHILDREN_MAX
    if var.kind == "income_step":
        return 1 <= code <= 10
    assert var.codes is not None
    return code in var.codes


def parse_survey(
    rows: Iterable[Mapping[str, object]],
    codebook: Codebook,
    columns: Sequence[str] | None = None,
) -> tuple[list[Respondent], IngestStats]:
    """Turn raw CSV rows into Respondents with validated raw codes.

    Missing and out-of-range codes become absent values (the latter are
    counted); a non-integer token in a coded column is a hard error since
    it means the file is not what the codebook says it is.
    """
    stats = IngestStats()
    respondents: list[Respondent] = []

    demo_vars = codebook.demographics
    required = [var.id for var in demo_vars]
    rows = iter(rows)
    first: Mapping[str, object] | None = None
    if columns is None:
        try:
            first = next(rows)
        except StopIteration:
            return [], stats
        columns = list(first.keys())
    missing_cols = [c for c in required if c not in columns]
    if missing_cols:
        raise SurveyFormatError(f"missing required column(s): {', '.join(missing_cols)}")
    question_cols = [qid for qid in codebook.questions if qid in columns]

    def handle(row: Mapping[str, object], row_index: int) -> None:
        stats.rows_read += 1
        cells = {k: (str(v).strip() if v is not None else "") for k, v in row.items()}
        if all(v == "" for v in cells.values()):
            stats.rows_dropped += 1
            return

        missing_demo = False
        country: str | None = None
        demographics: dict[str, int] = {}
        for var in demo_vars:
            raw = cells.get(var.id, "")
            if var.kind == "country":
                if raw == "":
                    missing_demo = True
                elif not is_valid_iso3(raw):
                    stats.out_of_range_coerced += 1
                    missing_demo = True
                else:
                    country = raw
                continue
            code = _read_code(raw, var.id, row_index)
            if code is None or codebook.is_missing(code):
                missing_demo = True
            elif not _demographic_code_valid(var, code):
                stats.out_of_range_coerced += 1
                missing_demo = True
            else:
                demographics[var.attribute] = code

        answers: dict[str, int] = {}
        for qid in question_cols:
            spec = codebook.questions[qid]
            code = _read_code(cells.get(qid, ""), qid, row_index)
            if code is None or codebook.is_missing(code):
                continue
            if not (spec.raw_range[0] <= code <= spec.raw_range[1]):
                stats.out_of_range_coerced += 1
                continue
            answers[qid] = code

        if missing_demo:
            stats.rows_missing_demographics += 1
        respondents.append(Respondent(
            row_index=row_index, country=country,
            demographics=demographics, answers=answers,
        ))
        stats.rows_kept += 1

    if first is not None:
        handle(first, 0)
    for i, row in enumerate(rows, start=1 if first is not None else 0):
        handle(row, i)
    return respondents, stats


def _read_code(raw: str, column: str, row_index: int) -> int | None:
    if raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise SurveyFormatError(
            f"row {row_index}: non-integer value {raw!r} in coded column {column}"
        ) from None


def load_survey_csv(path: str | Path, codebook: Codebook) -> tuple[list[Respondent], IngestStats]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SurveyFormatError(f"{path}: empty file, no header row")
        return parse_survey(reader, codebook, columns=list(reader.fieldnames))

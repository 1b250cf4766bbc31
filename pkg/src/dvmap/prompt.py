"""Role-conditioned prompt rendering and answer extraction.

The instruction template lives in a versioned resource file; its hash is
part of the completion cache key, so a wording change can never silently
reuse stale cached completions.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .benchmark import CorpusSample

TEMPLATE_VERSION = "v1"
_TEMPLATE_RESOURCE = f"resources/cot_template_{TEMPLATE_VERSION}.txt"

# Markers in the resource delimit the reasoning block that `direct` mode drops.
_COT_OPEN = "<<cot>>\n"
_COT_CLOSE = "<<end>>\n"

MODES = ("structured_cot", "direct")

# The identity block reads best with full country names; unknown codes fall
# back to themselves, keeping the mapping injective.
COUNTRY_NAMES: dict[str, str] = {
    "BRA": "Brazil", "CAN": "Canada", "CHN": "China", "EGY": "Egypt",
    "DEU": "Germany", "IND": "India", "JPN": "Japan", "RUS": "Russia",
    "GBR": "United Kingdom", "USA": "United States",
    "AUS": "Australia", "IDN": "Indonesia", "IRN": "Iran", "MEX": "Mexico",
    "NGA": "Nigeria", "PAK": "Pakistan", "TUR": "Türkiye", "VNM": "Vietnam",
}


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptInstance:
    sample_id: str
    mode: str
    text: str
    options: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "mode": self.mode,
            "text": self.text,
            "options": list(self.options),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PromptInstance":
        return cls(
            sample_id=str(obj["sample_id"]),
            mode=str(obj["mode"]),
            text=str(obj["text"]),
            options=tuple(obj["options"]),
        )


@dataclass(frozen=True)
class ParseResult:
    status: str                 # "ok" or "format_error"
    label: str | None = None
    index: int | None = None
    reason: str | None = None   # no_tag | multiple_tags | unknown_label

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return {"status": self.status, "label": self.label,
                "index": self.index, "reason": self.reason}

    @classmethod
    def from_json(cls, obj: dict) -> "ParseResult":
        return cls(
            status=str(obj["status"]),
            label=obj.get("label"),
            index=obj.get("index") if obj.get("index") is None else int(obj["index"]),
            reason=obj.get("reason"),
        )


@lru_cache(maxsize=1)
def _template_text() -> str:
    return resources.files("dvmap").joinpath(_TEMPLATE_RESOURCE).read_text(encoding="utf-8")


@lru_cache(maxsize=1)
def template_fingerprint() -> str:
    """Hash of the raw template resource, used in completion cache keys."""
    return hashlib.sha256(_template_text().encode("utf-8")).hexdigest()


def _template_for_mode(mode: str) -> str:
    text = _template_text()
    start = text.index(_COT_OPEN)
    end = text.index(_COT_CLOSE) + len(_COT_CLOSE)
    if mode == "direct":
        return text[:start] + text[end:]
    body = text[start + len(_COT_OPEN):end - len(_COT_CLOSE)]
    return text[:start] + body + text[end:]


def render_prompt(sample: CorpusSample, mode: str = "structured_cot") -> PromptInstance:
    """Render the instruction text for one benchmark sample.

    Every profile attribute is injected exactly once; `direct` mode omits
    the step-by-step reasoning block and changes nothing else.
    """
    if mode not in MODES:
        raise PromptError(f"unknown prompt mode: {mode!r}")
    profile = sample.profile
    options = tuple(sample.question["options"])
    fields = profile.to_json()
    fields["country"] = COUNTRY_NAMES.get(profile.country, profile.country)
    text = _template_for_mode(mode).format(
        question=json.dumps(sample.question["text"], ensure_ascii=False),
        options=json.dumps(list(options), ensure_ascii=False),
        **fields,
    )
    return PromptInstance(sample_id=sample.sample_id, mode=mode,
                          text=text, options=options)


_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def parse_answer(completion: str, options: Sequence[str]) -> ParseResult:
    """Extract the option named inside a single <answer></answer> tag pair.

    Content is trimmed and matched case-insensitively against the option
    labels. Every malformed shape maps to a format_error reason; parsing
    never raises on model output.
    """
    matches = _ANSWER_RE.findall(completion)
    if not matches:
        return ParseResult(status="format_error", reason="no_tag")
    if len(matches) > 1:
        return ParseResult(status="format_error", reason="multiple_tags")
    content = matches[0].strip().lower()
    for index, label in enumerate(options):
        if content == label.strip().lower():
            return ParseResult(status="ok", label=label, index=index)
    return ParseResult(status="format_error", reason="unknown_label")

"""Run configuration: one JSON file drives every pipeline stage.

Unknown keys are hard errors (a typo must not silently fall back to a
default), problems are aggregated into a single report, and the fully
resolved config (defaults included) is echoed as an artifact so every run
is auditable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .attribution import AttributionError, ForestConfig
from .benchmark import (
    DEFAULT_CROSS_VALUE_QUESTIONS,
    DEFAULT_TEST_COUNTRIES,
    DEFAULT_TRAIN_COUNTRIES,
    DEFAULT_TRAIN_QUESTIONS,
    SPLIT_NAMES,
    BenchmarkError,
    SplitSpec,
)
from .grpo import DEFAULT_KEY_FIELDS, GrpoError, RewardConfig, TrainerConfig
from .inference import EndpointConfig, InferenceError
from .prompt import MODES
from .synthetic import SyntheticSpec, SyntheticSpecError


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    survey_csv: str | None = None
    codebook: str | None = None
    out_dir: str = "out"
    cache_dir: str | None = None          # default: <out_dir>/cache
    seed: int = 0
    consensus_threshold: str = "strict"
    prompt_mode: str = "structured_cot"
    eval_splits: tuple[str, ...] = ("cross_demo",)
    eval_groupings: tuple[str, ...] = ("country", "question")
    synthetic: SyntheticSpec | None = None
    split: SplitSpec = field(default_factory=SplitSpec)
    split_seed: int | None = None         # None: derived from the global seed
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    train: TrainerConfig = field(default_factory=TrainerConfig)
    train_seed: int | None = None
    forest: ForestConfig = field(default_factory=ForestConfig)
    forest_seed: int | None = None
    forest_source: str = "respondents"    # "respondents" or "consensus"
    flip_split: str = "cross_demo"
    flip_attribute: str = "income_bracket"
    flip_values: tuple[str, str] = ("Low", "High")
    semdist_embeddings: str | None = None
    semdist_gains: str | None = None
    report_runs: tuple[tuple[str, str], ...] | None = None   # (label, path)

    def resolved(self) -> dict:
        """Full picture of the run, defaults and derivations included."""
        return {
            "paths": {
                "survey_csv": self.survey_csv,
                "codebook": self.codebook,
                "out_dir": self.out_dir,
                "cache_dir": self.cache_dir or str(Path(self.out_dir) / "cache"),
            },
            "seed": self.seed,
            "consensus": {"threshold": self.consensus_threshold},
            "prompt": {"mode": self.prompt_mode},
            "eval": {"splits": list(self.eval_splits), "groupings": list(self.eval_groupings)},
            "synthetic": self.synthetic.to_json() if self.synthetic else None,
            "split": {
                "train_countries": list(self.split.train_countries),
                "test_countries": list(self.split.test_countries),
                "train_questions": list(self.split.train_questions),
                "cross_value_questions": list(self.split.cross_value_questions),
                "demo_holdout_ratio": self.split.demo_holdout_ratio,
                "seed": self.split_seed,
            },
            "endpoint": self.endpoint.to_json(),
            "reward": self.reward.to_json(),
            "train": {**self.train.to_json(), "seed": self.train_seed},
            "forest": {**self.forest.to_json(), "seed": self.forest_seed,
                       "source": self.forest_source},
            "flip": {"split": self.flip_split, "attribute": self.flip_attribute,
                     "values": list(self.flip_values)},
            "semdist": {"embeddings": self.semdist_embeddings, "gains": self.semdist_gains},
            "report": {"runs": [list(r) for r in self.report_runs]} if self.report_runs else {"runs": None},
        }


_TOP_KEYS = {
    "paths", "seed", "consensus", "prompt", "eval", "synthetic", "split",
    "endpoint", "reward", "train", "forest", "flip", "semdist", "report",
}


class _Section:
    """Typed key extraction with error accumulation."""

    def __init__(self, name: str, obj: dict, known: set[str], problems: list[str]) -> None:
        self.name = name
        self.obj = obj
        self.problems = problems
        for key in sorted(set(obj) - known):
            problems.append(f"unknown key: {name}.{key}" if name else f"unknown key: {key}")

    def get(self, key: str, kind: type | tuple, default: Any) -> Any:
        if key not in self.obj:
            return default
        value = self.obj[key]
        where = f"{self.name}.{key}" if self.name else key
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            self.problems.append(f"{where}: expected int, got bool")
            return default
        if not isinstance(value, kind):
            kname = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
            self.problems.append(f"{where}: expected {kname}, got {type(value).__name__}")
            return default
        return value

    def str_list(self, key: str, default: Sequence[str]) -> tuple[str, ...]:
        raw = self.get(key, list, None)
        if raw is None:
            return tuple(default)
        where = f"{self.name}.{key}" if self.name else key
        if not all(isinstance(v, str) for v in raw):
            self.problems.append(f"{where}: expected a list of strings")
            return tuple(default)
        return tuple(raw)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return parse_config(raw)


def parse_config(raw: dict) -> RunConfig:
    problems: list[str] = []
    top = _Section("", raw, _TOP_KEYS, problems)
    cfg = RunConfig()

    cfg.seed = top.get("seed", int, 0)

    paths = _Section("paths", top.get("paths", dict, {}),
                     {"survey_csv", "codebook", "out_dir", "cache_dir"}, problems)
    cfg.survey_csv = paths.get("survey_csv", str, None)
    cfg.codebook = paths.get("codebook", str, None)
    cfg.out_dir = paths.get("out_dir", str, "out")
    cfg.cache_dir = paths.get("cache_dir", str, None)

    consensus = _Section("consensus", top.get("consensus", dict, {}), {"threshold"}, problems)
    cfg.consensus_threshold = consensus.get("threshold", str, "strict")
    if cfg.consensus_threshold not in ("strict", "relaxed"):
        problems.append(f"consensus.threshold must be 'strict' or 'relaxed', got {cfg.consensus_threshold!r}")

    prompt = _Section("prompt", top.get("prompt", dict, {}), {"mode"}, problems)
    cfg.prompt_mode = prompt.get("mode", str, "structured_cot")
    if cfg.prompt_mode not in MODES:
        problems.append(f"prompt.mode must be one of {list(MODES)}, got {cfg.prompt_mode!r}")

    ev = _Section("eval", top.get("eval", dict, {}), {"splits", "groupings"}, problems)
    cfg.eval_splits = ev.str_list("splits", ("cross_demo",))
    for name in cfg.eval_splits:
        if name not in SPLIT_NAMES:
            problems.append(f"eval.splits: unknown split {name!r}")
    cfg.eval_groupings = ev.str_list("groupings", ("country", "question"))

    syn_raw = top.get("synthetic", dict, None)
    if syn_raw is not None:
        try:
            cfg.synthetic = SyntheticSpec.from_config(syn_raw)
        except SyntheticSpecError as exc:
            problems.append(str(exc))

    sp = _Section("split", top.get("split", dict, {}),
                  {"train_countries", "test_countries", "train_questions",
                   "cross_value_questions", "demo_holdout_ratio", "seed"}, problems)
    cfg.split_seed = sp.get("seed", int, None)
    try:
        cfg.split = SplitSpec(
            train_countries=sp.str_list("train_countries", DEFAULT_TRAIN_COUNTRIES),
            test_countries=sp.str_list("test_countries", DEFAULT_TEST_COUNTRIES),
            train_questions=sp.str_list("train_questions", DEFAULT_TRAIN_QUESTIONS),
            cross_value_questions=sp.str_list("cross_value_questions", DEFAULT_CROSS_VALUE_QUESTIONS),
            demo_holdout_ratio=sp.get("demo_holdout_ratio", float, 0.1),
        )
        cfg.split.validate()
    except BenchmarkError as exc:
        problems.append(str(exc))

    ep = _Section("endpoint", top.get("endpoint", dict, {}),
                  {"backend", "base_url", "model", "temperature", "max_tokens", "timeout_s",
                   "max_in_flight", "retries", "backoff_s", "api_key_env", "stub"}, problems)
    stub = _Section("endpoint.stub", ep.get("stub", dict, {}), {"mode", "rules"}, problems)
    rules: list[tuple[str, str]] = []
    for i, rule in enumerate(stub.get("rules", list, [])):
        if (not isinstance(rule, dict) or set(rule) != {"pattern", "completion"}
                or not all(isinstance(v, str) for v in rule.values())):
            problems.append(f"endpoint.stub.rules[{i}]: expected {{pattern, completion}} strings")
        else:
            rules.append((rule["pattern"], rule["completion"]))
    try:
        cfg.endpoint = EndpointConfig(
            backend=ep.get("backend", str, "stub"),
            base_url=ep.get("base_url", str, ""),
            model=ep.get("model", str, "stub-model"),
            temperature=ep.get("temperature", float, 0.0),
            max_tokens=ep.get("max_tokens", int, 512),
            timeout_s=ep.get("timeout_s", float, 30.0),
            max_in_flight=ep.get("max_in_flight", int, 4),
            retries=ep.get("retries", int, 2),
            backoff_s=ep.get("backoff_s", float, 0.5),
            api_key_env=ep.get("api_key_env", str, "DVMAP_API_KEY"),
            stub_mode=stub.get("mode", str, "script"),
            stub_rules=tuple(rules),
        )
        cfg.endpoint.validate()
    except InferenceError as exc:
        problems.append(str(exc))

    rw = _Section("reward", top.get("reward", dict, {}), {"mode", "alpha", "beta"}, problems)
    try:
        cfg.reward = RewardConfig(
            mode=rw.get("mode", str, "binary"),
            alpha=rw.get("alpha", float, 1.0),
            beta=rw.get("beta", float, 0.1),
        )
        cfg.reward.validate()
    except GrpoError as exc:
        problems.append(str(exc))

    tr = _Section("train", top.get("train", dict, {}),
                  {"group_size", "steps", "learning_rate", "temperature",
                   "key_fields", "seed"}, problems)
    cfg.train_seed = tr.get("seed", int, None)
    try:
        cfg.train = TrainerConfig(
            group_size=tr.get("group_size", int, 8),
            steps=tr.get("steps", int, 200),
            learning_rate=tr.get("learning_rate", float, 25.0),
            temperature=tr.get("temperature", float, 1.0),
            key_fields=tr.str_list("key_fields", DEFAULT_KEY_FIELDS),
            reward=cfg.reward,
        )
        cfg.train.validate()
    except GrpoError as exc:
        problems.append(str(exc))

    fo = _Section("forest", top.get("forest", dict, {}),
                  {"n_trees", "max_depth", "min_samples_leaf", "features_per_split",
                   "bootstrap", "min_samples_per_question", "include_country",
                   "seed", "source"}, problems)
    cfg.forest_seed = fo.get("seed", int, None)
    cfg.forest_source = fo.get("source", str, "respondents")
    if cfg.forest_source not in ("respondents", "consensus"):
        problems.append(f"forest.source must be 'respondents' or 'consensus', got {cfg.forest_source!r}")
    try:
        cfg.forest = ForestConfig(
            n_trees=fo.get("n_trees", int, 100),
            max_depth=fo.get("max_depth", int, 12),
            min_samples_leaf=fo.get("min_samples_leaf", int, 5),
            features_per_split=fo.get("features_per_split", (str, int), "sqrt"),
            bootstrap=fo.get("bootstrap", bool, True),
            min_samples_per_question=fo.get("min_samples_per_question", int, 50),
            include_country=fo.get("include_country", bool, True),
        )
        cfg.forest.validate()
    except AttributionError as exc:
        problems.append(str(exc))

    fl = _Section("flip", top.get("flip", dict, {}), {"split", "attribute", "values"}, problems)
    cfg.flip_split = fl.get("split", str, "cross_demo")
    if cfg.flip_split not in SPLIT_NAMES:
        problems.append(f"flip.split: unknown split {cfg.flip_split!r}")
    cfg.flip_attribute = fl.get("attribute", str, "income_bracket")
    values = fl.str_list("values", ("Low", "High"))
    if len(values) != 2:
        problems.append("flip.values must name exactly two attribute values")
    else:
        cfg.flip_values = (values[0], values[1])

    sd = _Section("semdist", top.get("semdist", dict, {}), {"embeddings", "gains"}, problems)
    cfg.semdist_embeddings = sd.get("embeddings", str, None)
    cfg.semdist_gains = sd.get("gains", str, None)

    rp = _Section("report", top.get("report", dict, {}), {"runs"}, problems)
    runs_raw = rp.get("runs", list, None)
    if runs_raw is not None:
        runs: list[tuple[str, str]] = []
        for i, entry in enumerate(runs_raw):
            if (not isinstance(entry, dict) or set(entry) != {"label", "path"}
                    or not all(isinstance(v, str) for v in entry.values())):
                problems.append(f"report.runs[{i}]: expected {{label, path}} strings")
            else:
                runs.append((entry["label"], entry["path"]))
        cfg.report_runs = tuple(runs)

    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return cfg

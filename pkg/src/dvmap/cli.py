"""Pipeline driver: subcommands over a single run config.

Every stage writes its artifacts plus a manifest recording input hashes,
output hashes, the stage seed, and the relevant config slice. Manifests
contain only relative names so identical runs in different directories
produce identical bytes. `--resume` turns an unchanged stage into a no-op
and a changed one into an error, never a silent partial rerun.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import sys
import time
from pathlib import Path
from typing import Callable

from . import __version__
from .archetype import ArchetypeError, ConsensusRecord, entropy_summary, extract_consensus
from .artifacts import read_json, read_jsonl, sha256_file, stable_u64, write_json, write_jsonl, atomic_write_text
from .attribution import AttributionError, importance_matrix, labeled_from_records, labeled_from_respondents
from .benchmark import (
    BenchmarkError, CorpusSample, SPLIT_NAMES, SplitSpec,
    build_splits, make_counterfactual_pairs,
)
from .config import ConfigError, RunConfig, load_config
from .grpo import GrpoError, majority_class_accuracy, train_toy
from .inference import CompletionCache, InferenceError, make_backend, run_eval
from .metrics import MetricError, aggregate_report, flip_rate
from .prompt import PromptInstance, PromptError, render_prompt, template_fingerprint
from .report import ReportError, collect_run, render_report
from .semdist import EmbeddingTable, SemdistError, distance_profile, gain_distance_correlation, to_csv_text
from .survey import CodebookError, Respondent, SurveyFormatError, default_codebook_path, load_codebook, load_survey_csv
from .synthetic import SyntheticSpecError, generate_synthetic, write_survey_csv


class StageError(RuntimeError):
    pass


_ERRORS = (
    StageError, ConfigError, CodebookError, SurveyFormatError, ArchetypeError,
    BenchmarkError, PromptError, MetricError, GrpoError, AttributionError,
    SemdistError, InferenceError, ReportError, SyntheticSpecError, OSError,
)

_REPORT_SOURCES = ("eval_report.json", "flip_rate.json", "entropy_summary.json",
                   "training_trace.csv", "importance_matrix.csv")


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def stage_seed(cfg: RunConfig, stage: str) -> int:
    return stable_u64("stage", cfg.seed, stage)


def _codebook_path(cfg: RunConfig) -> Path:
    return Path(cfg.codebook) if cfg.codebook else default_codebook_path()


def _run_stage(
    name: str,
    out: Path,
    resume: bool,
    seed: int,
    config_echo: dict,
    inputs: dict[str, Path],
    runner: Callable[[], list[str]],
) -> None:
    input_hashes: dict[str, str] = {}
    for rel in sorted(inputs):
        path = Path(inputs[rel])
        if not path.is_file():
            raise StageError(f"{name}: missing upstream artifact {rel}; run the producing stage first")
        input_hashes[rel] = sha256_file(path)

    manifest_path = out / "manifests" / f"{name}.json"
    if resume and manifest_path.is_file():
        prev = read_json(manifest_path)
        same = (prev.get("inputs") == input_hashes
                and prev.get("config") == config_echo
                and prev.get("seed") == seed
                and prev.get("tool_version") == __version__)
        if not same:
            raise StageError(f"{name}: inputs or config changed since the recorded run; "
                             "rerun without --resume")
        recorded = prev.get("outputs", {})
        stale = [rel for rel, digest in recorded.items()
                 if not (out / rel).is_file() or sha256_file(out / rel) != digest]
        if stale:
            raise StageError(f"{name}: recorded outputs modified or missing: {sorted(stale)}; "
                             "rerun without --resume")
        _log("stage_skipped", stage=name, reason="unchanged inputs")
        return

    _log("stage_start", stage=name, seed=seed)
    t0 = time.monotonic()
    out_names = runner()
    output_hashes = {rel: sha256_file(out / rel) for rel in sorted(out_names)}
    write_json(manifest_path, {
        "stage": name,
        "tool_version": __version__,
        "seed": seed,
        "config": config_echo,
        "inputs": input_hashes,
        "outputs": output_hashes,
    })
    _log("stage_complete", stage=name, outputs=sorted(out_names),
         seconds=round(time.monotonic() - t0, 3))


# ---------------------------------------------------------------------------
# Stage implementations. Each returns the relative names it wrote.

def _stage_generate(cfg: RunConfig, out: Path, resume: bool) -> None:
    if cfg.synthetic is None:
        raise StageError("generate: config has no synthetic section")
    codebook = load_codebook(_codebook_path(cfg))
    seed = stage_seed(cfg, "generate")

    def runner() -> list[str]:
        header, rows = generate_synthetic(cfg.synthetic, codebook, seed)
        write_survey_csv(out / "survey.csv", header, rows)
        _log("generated", rows=len(rows))
        return ["survey.csv"]

    _run_stage("generate", out, resume, seed,
               {"synthetic": cfg.synthetic.to_json()},
               {"codebook.json": _codebook_path(cfg)}, runner)


def _survey_path(cfg: RunConfig, out: Path) -> Path:
    # Unset survey path falls back to this run's generated corpus.
    return Path(cfg.survey_csv) if cfg.survey_csv else out / "survey.csv"


def _stage_ingest(cfg: RunConfig, out: Path, resume: bool) -> None:
    codebook = load_codebook(_codebook_path(cfg))
    survey = _survey_path(cfg, out)

    def runner() -> list[str]:
        respondents, stats = load_survey_csv(survey, codebook)
        write_jsonl(out / "respondents.jsonl", (r.to_json() for r in respondents))
        write_json(out / "ingest_stats.json", stats.to_json())
        _log("ingested", rows_kept=stats.rows_kept, rows_dropped=stats.rows_dropped)
        return ["respondents.jsonl", "ingest_stats.json"]

    _run_stage("ingest", out, resume, stage_seed(cfg, "ingest"), {},
               {"survey.csv": survey, "codebook.json": _codebook_path(cfg)}, runner)


def _load_respondents(out: Path) -> list[Respondent]:
    return [Respondent.from_json(row) for row in read_jsonl(out / "respondents.jsonl")]


def _stage_archetype(cfg: RunConfig, out: Path, resume: bool) -> None:
    codebook = load_codebook(_codebook_path(cfg))

    def runner() -> list[str]:
        respondents = _load_respondents(out)
        records, stats = extract_consensus(respondents, codebook, threshold=cfg.consensus_threshold)
        write_jsonl(out / "consensus.jsonl", (r.to_json() for r in records))
        write_json(out / "filter_stats.json", stats.to_json())
        write_json(out / "entropy_summary.json", entropy_summary(respondents, codebook))
        _log("consensus", retained=stats.retained, total_pairs=stats.total_pairs)
        return ["consensus.jsonl", "filter_stats.json", "entropy_summary.json"]

    _run_stage("archetype", out, resume, stage_seed(cfg, "archetype"),
               {"threshold": cfg.consensus_threshold},
               {"respondents.jsonl": out / "respondents.jsonl",
                "codebook.json": _codebook_path(cfg)}, runner)


def _split_spec(cfg: RunConfig) -> SplitSpec:
    seed = cfg.split_seed if cfg.split_seed is not None else stage_seed(cfg, "split")
    return dataclasses.replace(cfg.split, seed=seed)


def _stage_split(cfg: RunConfig, out: Path, resume: bool) -> None:
    codebook = load_codebook(_codebook_path(cfg))
    spec = _split_spec(cfg)
    echo = {
        "train_countries": list(spec.train_countries),
        "test_countries": list(spec.test_countries),
        "train_questions": list(spec.train_questions),
        "cross_value_questions": list(spec.cross_value_questions),
        "demo_holdout_ratio": spec.demo_holdout_ratio,
    }

    def runner() -> list[str]:
        records = [ConsensusRecord.from_json(r) for r in read_jsonl(out / "consensus.jsonl")]
        bundle = build_splits(records, spec, codebook)
        written = []
        for split in SPLIT_NAMES:
            rel = f"splits/{split}.jsonl"
            write_jsonl(out / rel, (s.to_json() for s in bundle.splits[split]))
            written.append(rel)
        write_json(out / "bundle_meta.json", bundle.meta)
        _log("split", **{s: len(bundle.splits[s]) for s in SPLIT_NAMES})
        return written + ["bundle_meta.json"]

    _run_stage("split", out, resume, spec.seed, echo,
               {"consensus.jsonl": out / "consensus.jsonl",
                "codebook.json": _codebook_path(cfg)}, runner)


def _load_split(out: Path, split: str) -> list[CorpusSample]:
    return [CorpusSample.from_json(r) for r in read_jsonl(out / "splits" / f"{split}.jsonl")]


def _stage_prompts(cfg: RunConfig, out: Path, resume: bool) -> None:
    inputs = {f"splits/{s}.jsonl": out / "splits" / f"{s}.jsonl" for s in SPLIT_NAMES}

    def runner() -> list[str]:
        written = []
        for split in SPLIT_NAMES:
            samples = _load_split(out, split)
            rel = f"prompts_{split}.jsonl"
            write_jsonl(out / rel, (render_prompt(s, cfg.prompt_mode).to_json() for s in samples))
            written.append(rel)
        return written

    _run_stage("prompts", out, resume, stage_seed(cfg, "prompts"),
               {"mode": cfg.prompt_mode, "template": template_fingerprint()},
               inputs, runner)


def _stage_eval(cfg: RunConfig, out: Path, resume: bool) -> None:
    inputs: dict[str, Path] = {}
    for split in cfg.eval_splits:
        inputs[f"prompts_{split}.jsonl"] = out / f"prompts_{split}.jsonl"
        inputs[f"splits/{split}.jsonl"] = out / "splits" / f"{split}.jsonl"
    echo = {
        "mode": cfg.prompt_mode,
        "splits": list(cfg.eval_splits),
        "groupings": list(cfg.eval_groupings),
        "endpoint": cfg.endpoint.to_json(),
    }

    def runner() -> list[str]:
        cache = CompletionCache(cfg.cache_dir or out / "cache")
        written = []
        split_reports: dict[str, dict] = {}
        for split in cfg.eval_splits:
            corpus = {s.sample_id: s for s in _load_split(out, split)}
            prompts = [PromptInstance.from_json(r) for r in read_jsonl(out / f"prompts_{split}.jsonl")]
            backend = make_backend(cfg.endpoint, corpus=corpus)
            records = run_eval(prompts, corpus, cfg.endpoint, backend=backend, cache=cache)
            rel = f"predictions_{split}.jsonl"
            write_jsonl(out / rel, (r.to_json() for r in records))
            written.append(rel)
            preds = {r.sample_id: r.parse for r in records}
            report = aggregate_report(preds, corpus, groupings=cfg.eval_groupings)
            split_reports[split] = report.to_json()
            _log("evaluated", split=split, n=report.n, accuracy=round(report.accuracy, 6),
                 cache_hits=cache.hits, cache_misses=cache.misses)
        write_json(out / "eval_report.json", {
            "prompt_mode": cfg.prompt_mode,
            "backend": cfg.endpoint.backend,
            "model": cfg.endpoint.model,
            "splits": split_reports,
        })
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["split", "n", "accuracy", "likert_consistency",
                         "wasserstein_mean", "unparsed_fraction"])
        for split, rep in sorted(split_reports.items()):
            writer.writerow([
                split, rep["n"], f"{rep['accuracy']:.6f}",
                "" if rep["likert_consistency"] is None else f"{rep['likert_consistency']:.6f}",
                "" if rep["wasserstein_mean"] is None else f"{rep['wasserstein_mean']:.6f}",
                f"{rep['unparsed_fraction']:.6f}",
            ])
        atomic_write_text(out / "eval_summary.csv", buf.getvalue())
        return written + ["eval_report.json", "eval_summary.csv"]

    _run_stage("eval", out, resume, stage_seed(cfg, "eval"), echo, inputs, runner)


def _stage_flip_rate(cfg: RunConfig, out: Path, resume: bool) -> None:
    echo = {
        "split": cfg.flip_split,
        "attribute": cfg.flip_attribute,
        "values": list(cfg.flip_values),
        "mode": cfg.prompt_mode,
        "endpoint": cfg.endpoint.to_json(),
    }

    def runner() -> list[str]:
        samples = _load_split(out, cfg.flip_split)
        pairs = make_counterfactual_pairs(samples, attribute=cfg.flip_attribute,
                                          values=cfg.flip_values)
        if not pairs:
            raise StageError(f"flip-rate: no {cfg.flip_attribute} counterfactual pairs "
                             f"in split {cfg.flip_split}")
        corpus = {s.sample_id: s for pair in pairs for s in (pair.original, pair.perturbed)}
        ordered = sorted(corpus.values(), key=lambda s: s.sample_id)
        prompts = [render_prompt(s, cfg.prompt_mode) for s in ordered]
        cache = CompletionCache(cfg.cache_dir or out / "cache")
        backend = make_backend(cfg.endpoint, corpus=corpus)
        records = run_eval(prompts, corpus, cfg.endpoint, backend=backend, cache=cache)
        preds = {r.sample_id: r.parse for r in records}
        result = flip_rate(pairs, preds)
        write_jsonl(out / "counterfactual_pairs.jsonl", (p.to_json() for p in pairs))
        write_jsonl(out / "flip_predictions.jsonl", (r.to_json() for r in records))
        write_json(out / "flip_rate.json", {
            "split": cfg.flip_split,
            "attribute": cfg.flip_attribute,
            "values": list(cfg.flip_values),
            **result.to_json(),
        })
        _log("flip_rate", rate=round(result.rate, 6), scored=result.scored,
             excluded=result.excluded)
        return ["counterfactual_pairs.jsonl", "flip_predictions.jsonl", "flip_rate.json"]

    _run_stage("flip-rate", out, resume, stage_seed(cfg, "flip-rate"), echo,
               {f"splits/{cfg.flip_split}.jsonl": out / "splits" / f"{cfg.flip_split}.jsonl"},
               runner)


def _stage_importance(cfg: RunConfig, out: Path, resume: bool) -> None:
    codebook = load_codebook(_codebook_path(cfg))
    seed = cfg.forest_seed if cfg.forest_seed is not None else stage_seed(cfg, "importance")
    fcfg = dataclasses.replace(cfg.forest, seed=seed)
    source_rel = "respondents.jsonl" if cfg.forest_source == "respondents" else "consensus.jsonl"

    def runner() -> list[str]:
        if cfg.forest_source == "respondents":
            labeled = labeled_from_respondents(_load_respondents(out), codebook)
        else:
            records = [ConsensusRecord.from_json(r) for r in read_jsonl(out / "consensus.jsonl")]
            labeled = labeled_from_records(records)
        matrix = importance_matrix(labeled, codebook, fcfg)
        atomic_write_text(out / "importance_matrix.csv", matrix.to_csv_text())
        meta = {k: v for k, v in matrix.to_json().items() if k != "values"}
        write_json(out / "importance_meta.json", {"config": fcfg.to_json(),
                                                  "source": cfg.forest_source, **meta})
        _log("importance", questions=len(matrix.questions), skipped=len(matrix.skipped))
        return ["importance_matrix.csv", "importance_meta.json"]

    _run_stage("importance", out, resume, seed,
               {"forest": fcfg.to_json(), "source": cfg.forest_source},
               {source_rel: out / source_rel, "codebook.json": _codebook_path(cfg)},
               runner)


def _stage_train_toy(cfg: RunConfig, out: Path, resume: bool) -> None:
    seed = cfg.train_seed if cfg.train_seed is not None else stage_seed(cfg, "train-toy")
    tcfg = dataclasses.replace(cfg.train, seed=seed, reward=cfg.reward)

    def runner() -> list[str]:
        samples = _load_split(out, "train")
        policy, trace = train_toy(samples, tcfg)
        write_json(out / "policy.json", policy.to_json())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "mean_reward", "argmax_accuracy"])
        for row in trace:
            writer.writerow([row["step"], f"{row['mean_reward']:.6f}",
                             f"{row['argmax_accuracy']:.6f}"])
        atomic_write_text(out / "training_trace.csv", buf.getvalue())
        final_acc = trace[-1]["argmax_accuracy"] if trace else None
        write_json(out / "training_summary.json", {
            "n_samples": len(samples),
            "steps": len(trace),
            "final_argmax_accuracy": final_acc,
            "majority_class_accuracy": majority_class_accuracy(samples),
            "config": tcfg.to_json(),
        })
        _log("trained", steps=len(trace), final_argmax_accuracy=final_acc)
        return ["policy.json", "training_trace.csv", "training_summary.json"]

    _run_stage("train-toy", out, resume, seed, {"train": tcfg.to_json()},
               {"splits/train.jsonl": out / "splits" / "train.jsonl"}, runner)


def _stage_semdist(cfg: RunConfig, out: Path, resume: bool) -> None:
    if not cfg.semdist_embeddings:
        raise StageError("semdist: config must set semdist.embeddings")
    emb_path = Path(cfg.semdist_embeddings)
    inputs = {"embeddings.jsonl": emb_path}
    if cfg.semdist_gains:
        inputs["gains.json"] = Path(cfg.semdist_gains)
    spec = _split_spec(cfg)

    def runner() -> list[str]:
        table = EmbeddingTable.from_jsonl(emb_path, source=emb_path.name)
        gains = read_json(Path(cfg.semdist_gains)) if cfg.semdist_gains else None
        records = distance_profile(table, list(spec.cross_value_questions),
                                   list(spec.train_questions), gains=gains)
        atomic_write_text(out / "semdist.csv", to_csv_text(records))
        meta: dict = {
            "source": emb_path.name,
            "dim": table.dim,
            "n_test": len(spec.cross_value_questions),
            "n_train": len(spec.train_questions),
        }
        if gains is not None:
            meta["gain_correlation"] = {
                which: gain_distance_correlation(records, which=which)
                for which in ("d_min", "d_avg")
            }
        write_json(out / "semdist_meta.json", meta)
        _log("semdist", n_test=meta["n_test"], n_train=meta["n_train"])
        return ["semdist.csv", "semdist_meta.json"]

    _run_stage("semdist", out, resume, stage_seed(cfg, "semdist"),
               {"embeddings_name": emb_path.name, "has_gains": bool(cfg.semdist_gains)},
               inputs, runner)


def _stage_report(cfg: RunConfig, out: Path, resume: bool) -> None:
    runs = list(cfg.report_runs) if cfg.report_runs else [("run", str(out))]
    inputs: dict[str, Path] = {}
    for label, run_dir in runs:
        for name in _REPORT_SOURCES:
            path = Path(run_dir) / name
            if path.is_file():
                inputs[f"{label}/{name}"] = path

    def runner() -> list[str]:
        written = render_report(out, runs)
        _log("report", files=len(written))
        return written

    _run_stage("report", out, resume, stage_seed(cfg, "report"),
               {"runs": [label for label, _ in runs]}, inputs, runner)


STAGES: dict[str, Callable[[RunConfig, Path, bool], None]] = {
    "generate": _stage_generate,
    "ingest": _stage_ingest,
    "archetype": _stage_archetype,
    "split": _stage_split,
    "prompts": _stage_prompts,
    "eval": _stage_eval,
    "flip-rate": _stage_flip_rate,
    "importance": _stage_importance,
    "train-toy": _stage_train_toy,
    "semdist": _stage_semdist,
    "report": _stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvmap",
        description="Survey-to-values pipeline: consensus extraction, benchmark "
                    "splits, prompt evaluation, and attribution analyses.",
    )
    parser.add_argument("subcommand", choices=sorted(STAGES))
    parser.add_argument("--config", required=True, help="path to the run config JSON")
    parser.add_argument("--resume", action="store_true",
                        help="skip the stage when inputs and config are unchanged")
    parser.add_argument("--seed", type=int, default=None, help="override the global seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", cfg.resolved())
        STAGES[args.subcommand](cfg, out, args.resume)
    except _ERRORS as exc:
        _log("error", stage=args.subcommand, error=str(exc),
             kind=type(exc).__name__)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Render run artifacts into a summary table and figures.

The report stage is read-only with respect to upstream artifacts: it
collects whatever eval reports, traces, and matrices exist in the listed
run directories and renders only those. Missing artifacts are skipped, not
errors, so partial pipelines still produce a useful report.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import atomic_write_text, write_json


class ReportError(ValueError):
    pass


def _maybe_json(path: Path) -> dict | None:
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def _maybe_csv(path: Path) -> list[dict] | None:
    if not path.is_file():
        return None
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def collect_run(run_dir: str | Path) -> dict:
    """Everything reportable found in one run directory."""
    d = Path(run_dir)
    return {
        "eval": _maybe_json(d / "eval_report.json"),
        "flip": _maybe_json(d / "flip_rate.json"),
        "entropy": _maybe_json(d / "entropy_summary.json"),
        "trace": _maybe_csv(d / "training_trace.csv"),
        "importance": _maybe_csv(d / "importance_matrix.csv"),
    }


def _pct(value: float | None) -> str:
    return "" if value is None else f"{100.0 * value:.2f}%"


def summary_rows(runs: list[tuple[str, dict]]) -> list[dict]:
    """One row per (run, split) with the headline metrics."""
    rows: list[dict] = []
    for label, data in runs:
        ev = data["eval"]
        flip = data["flip"]
        split_reports = (ev or {}).get("splits", {})
        if not split_reports and flip is None:
            continue
        if not split_reports:
            rows.append({
                "run": label, "split": "", "n": None, "accuracy": None,
                "likert_consistency": None, "wasserstein_mean": None,
                "unparsed_fraction": None, "flip_rate": flip["rate"],
            })
            continue
        for split, rep in sorted(split_reports.items()):
            rows.append({
                "run": label,
                "split": split,
                "n": rep["n"],
                "accuracy": rep["accuracy"],
                "likert_consistency": rep["likert_consistency"],
                "wasserstein_mean": rep["wasserstein_mean"],
                "unparsed_fraction": rep["unparsed_fraction"],
                "flip_rate": flip["rate"] if flip else None,
            })
    return rows


def summary_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "split", "n", "accuracy", "likert_consistency",
                     "wasserstein_mean", "unparsed_fraction", "flip_rate"])
    for row in rows:
        wd = row["wasserstein_mean"]
        writer.writerow([
            row["run"], row["split"],
            "" if row["n"] is None else row["n"],
            _pct(row["accuracy"]), _pct(row["likert_consistency"]),
            "" if wd is None else f"{wd:.4f}",
            _pct(row["unparsed_fraction"]), _pct(row["flip_rate"]),
        ])
    return buf.getvalue()


def _fig_entropy(data: dict, path: Path) -> None:
    hist = data["group_entropy_histogram"]
    edges = np.asarray(hist["bin_edges"], dtype=float)
    counts = np.asarray(hist["counts"], dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           color="#4878d0", edgecolor="white")
    ax.set_xlabel("group answer entropy (nats)")
    ax.set_ylabel("demographic groups")
    ax.set_title(f"Answer entropy across groups "
                 f"(zero-entropy fraction {data['zero_entropy_fraction']:.2f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_importance(rows: list[dict], path: Path) -> None:
    attributes = [k for k in rows[0] if k != "question"]
    questions = [r["question"] for r in rows]
    matrix = np.array([[float(r[a]) for a in attributes] for r in rows])
    fig, ax = plt.subplots(figsize=(1.0 + 0.75 * len(attributes),
                                    1.5 + 0.3 * len(questions)))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(attributes)), attributes, rotation=45, ha="right")
    ax.set_yticks(range(len(questions)), questions)
    ax.set_title("Demographic attribute importance per question")
    fig.colorbar(im, ax=ax, label="normalized importance")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_trace(traces: list[tuple[str, list[dict]]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, rows in traces:
        steps = [int(r["step"]) for r in rows]
        ax.plot(steps, [float(r["mean_reward"]) for r in rows],
                label=f"{label}: mean reward")
        ax.plot(steps, [float(r["argmax_accuracy"]) for r in rows],
                linestyle="--", label=f"{label}: argmax accuracy")
    ax.set_xlabel("step")
    ax.set_ylabel("value")
    ax.set_title("Policy training trace")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_flip(flips: list[tuple[str, dict]], path: Path) -> None:
    concepts = sorted({c for _, f in flips for c in f["per_concept"]})
    labels = ["overall"] + concepts
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(labels), 4))
    width = 0.8 / len(flips)
    x = np.arange(len(labels))
    for i, (run, f) in enumerate(flips):
        vals = [f["rate"]] + [f["per_concept"].get(c, {}).get("rate", 0.0) for c in concepts]
        ax.bar(x + i * width, vals, width, label=run)
    ax.set_xticks(x + width * (len(flips) - 1) / 2, labels, rotation=30, ha="right")
    ax.set_ylabel("flip rate")
    ax.set_title("Answer flips under income counterfactuals")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _fig_comparison(rows: list[dict], path: Path) -> None:
    labels = [f"{r['run']}/{r['split']}" if r["split"] else r["run"] for r in rows]
    x = np.arange(len(labels))
    fig, (ax1, ax2) = plt.subplots(
        1, 2, figsize=(2.0 + 1.1 * len(labels) + 4.0, 4))
    acc = [100.0 * (r["accuracy"] or 0.0) for r in rows]
    lc = [100.0 * (r["likert_consistency"] or 0.0) for r in rows]
    ax1.bar(x - 0.2, acc, 0.4, label="accuracy")
    ax1.bar(x + 0.2, lc, 0.4, label="likert consistency")
    ax1.set_xticks(x, labels, rotation=30, ha="right")
    ax1.set_ylabel("%")
    ax1.set_title("Agreement metrics")
    ax1.legend(fontsize=8)
    wd = [r["wasserstein_mean"] if r["wasserstein_mean"] is not None else 0.0 for r in rows]
    ax2.bar(x, wd, 0.5, color="#d65f5f")
    ax2.set_xticks(x, labels, rotation=30, ha="right")
    ax2.set_ylabel("mean distribution distance")
    ax2.set_title("Distribution gap (lower is better)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(out_dir: str | Path, runs: list[tuple[str, str]]) -> list[str]:
    """Write report/summary.{json,csv} and figures; return relative paths."""
    if not runs:
        raise ReportError("report needs at least one run directory")
    seen: set[str] = set()
    for label, _ in runs:
        if label in seen:
            raise ReportError(f"duplicate run label: {label}")
        seen.add(label)
    collected = [(label, collect_run(path)) for label, path in runs]

    report_dir = Path(out_dir) / "report"
    fig_dir = report_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    rows = summary_rows(collected)
    write_json(report_dir / "summary.json", {"rows": rows})
    atomic_write_text(report_dir / "summary.csv", summary_csv_text(rows))
    written += ["report/summary.json", "report/summary.csv"]

    entropy = next((d["entropy"] for _, d in collected if d["entropy"]), None)
    if entropy:
        _fig_entropy(entropy, fig_dir / "entropy_distribution.png")
        written.append("report/figures/entropy_distribution.png")

    importance = next((d["importance"] for _, d in collected if d["importance"]), None)
    if importance:
        _fig_importance(importance, fig_dir / "importance_heatmap.png")
        written.append("report/figures/importance_heatmap.png")

    traces = [(label, d["trace"]) for label, d in collected if d["trace"]]
    if traces:
        _fig_trace(traces, fig_dir / "training_trace.png")
        written.append("report/figures/training_trace.png")

    flips = [(label, d["flip"]) for label, d in collected if d["flip"]]
    if flips:
        _fig_flip(flips, fig_dir / "flip_rate.png")
        written.append("report/figures/flip_rate.png")

    if rows:
        _fig_comparison(rows, fig_dir / "metrics_comparison.png")
        written.append("report/figures/metrics_comparison.png")

    return written

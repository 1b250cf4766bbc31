import json

import pytest

from dvmap.report import (
    ReportError,
    collect_run,
    render_report,
    summary_csv_text,
    summary_rows,
)


def eval_report(accuracy=0.5, lc=0.75, wd=0.25, unparsed=0.1, n=20):
    return {
        "prompt_mode": "structured_cot",
        "backend": "stub",
        "model": "stub-model",
        "splits": {
            "cross_demo": {
                "n": n, "accuracy": accuracy, "likert_consistency": lc,
                "wasserstein_mean": wd, "unparsed_fraction": unparsed,
                "skipped_groups": 0, "per_country": {}, "per_question": {},
                "per_country_question": None, "entropy_accuracy_r": None,
                "wd_grouping": "country_question", "wd_population": "parsed",
            },
        },
    }


def flip_report(rate=0.2):
    return {
        "rate": rate, "scored": 10, "excluded": 0,
        "per_concept": {"Happiness": {"rate": rate, "scored": 10}},
    }


def entropy_summary():
    return {
        "n_groups": 40,
        "zero_entropy_fraction": 0.3,
        "group_entropy_histogram": {
            "bin_edges": [0.0, 0.25, 0.5, 0.75, 1.0],
            "counts": [12, 3, 5, 20],
        },
        "per_country_question_entropy": {},
    }


def write_run(run_dir, with_trace=True, with_importance=True,
              with_flip=True, with_entropy=True, accuracy=0.5):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "eval_report.json").write_text(
        json.dumps(eval_report(accuracy=accuracy)), encoding="utf-8")
    if with_flip:
        (run_dir / "flip_rate.json").write_text(
            json.dumps(flip_report()), encoding="utf-8")
    if with_entropy:
        (run_dir / "entropy_summary.json").write_text(
            json.dumps(entropy_summary()), encoding="utf-8")
    if with_trace:
        lines = ["step,mean_reward,argmax_accuracy"]
        lines += [f"{i},{0.1 * i:.6f},{0.2 * i:.6f}" for i in range(5)]
        (run_dir / "training_trace.csv").write_text("\n".join(lines) + "\n",
                                                    encoding="utf-8")
    if with_importance:
        (run_dir / "importance_matrix.csv").write_text(
            "question,country,religion\nQ46,0.400000,0.600000\n", encoding="utf-8")


class TestCollect:
    def test_reads_everything_present(self, tmp_path):
        write_run(tmp_path / "run")
        data = collect_run(tmp_path / "run")
        assert data["eval"]["splits"]["cross_demo"]["n"] == 20
        assert data["flip"]["rate"] == 0.2
        assert data["entropy"]["n_groups"] == 40
        assert len(data["trace"]) == 5
        assert data["importance"][0]["question"] == "Q46"

    def test_missing_artifacts_are_none(self, tmp_path):
        (tmp_path / "empty").mkdir()
        data = collect_run(tmp_path / "empty")
        assert all(v is None for v in data.values())


class TestSummary:
    def test_rows_join_eval_and_flip(self, tmp_path):
        write_run(tmp_path / "run")
        rows = summary_rows([("base", collect_run(tmp_path / "run"))])
        assert len(rows) == 1
        row = rows[0]
        assert row["run"] == "base"
        assert row["split"] == "cross_demo"
        assert row["accuracy"] == 0.5
        assert row["flip_rate"] == 0.2

    def test_flip_only_run_still_gets_a_row(self, tmp_path):
        d = tmp_path / "run"
        d.mkdir()
        (d / "flip_rate.json").write_text(json.dumps(flip_report(0.75)), encoding="utf-8")
        rows = summary_rows([("flip", collect_run(d))])
        assert rows == [{
            "run": "flip", "split": "", "n": None, "accuracy": None,
            "likert_consistency": None, "wasserstein_mean": None,
            "unparsed_fraction": None, "flip_rate": 0.75,
        }]

    def test_empty_run_contributes_nothing(self, tmp_path):
        (tmp_path / "none").mkdir()
        assert summary_rows([("none", collect_run(tmp_path / "none"))]) == []

    def test_csv_percent_formatting(self, tmp_path):
        write_run(tmp_path / "run")
        rows = summary_rows([("base", collect_run(tmp_path / "run"))])
        text = summary_csv_text(rows)
        lines = text.splitlines()
        assert lines[0] == ("run,split,n,accuracy,likert_consistency,"
                            "wasserstein_mean,unparsed_fraction,flip_rate")
        assert lines[1] == "base,cross_demo,20,50.00%,75.00%,0.2500,10.00%,20.00%"

    def test_csv_blanks_for_missing_values(self):
        rows = [{
            "run": "r", "split": "", "n": None, "accuracy": None,
            "likert_consistency": None, "wasserstein_mean": None,
            "unparsed_fraction": None, "flip_rate": None,
        }]
        assert summary_csv_text(rows).splitlines()[1] == "r,,,,,,,"


class TestRender:
    def test_full_run_renders_all_figures(self, tmp_path):
        write_run(tmp_path / "run")
        written = render_report(tmp_path / "out", [("base", str(tmp_path / "run"))])
        assert written == [
            "report/summary.json",
            "report/summary.csv",
            "report/figures/entropy_distribution.png",
            "report/figures/importance_heatmap.png",
            "report/figures/training_trace.png",
            "report/figures/flip_rate.png",
            "report/figures/metrics_comparison.png",
        ]
        for rel in written:
            path = tmp_path / "out" / rel
            assert path.is_file() and path.stat().st_size > 0
        summary = json.loads((tmp_path / "out" / "report" / "summary.json").read_text())
        assert summary["rows"][0]["run"] == "base"

    def test_figures_render_only_for_present_data(self, tmp_path):
        write_run(tmp_path / "run", with_trace=False, with_importance=False,
                  with_flip=False, with_entropy=False)
        written = render_report(tmp_path / "out", [("base", str(tmp_path / "run"))])
        assert written == [
            "report/summary.json",
            "report/summary.csv",
            "report/figures/metrics_comparison.png",
        ]
        assert not (tmp_path / "out" / "report" / "figures" / "training_trace.png").exists()

    def test_multi_run_comparison(self, tmp_path):
        write_run(tmp_path / "a", accuracy=0.4)
        write_run(tmp_path / "b", accuracy=0.9)
        written = render_report(tmp_path / "out", [
            ("a", str(tmp_path / "a")),
            ("b", str(tmp_path / "b")),
        ])
        summary = json.loads((tmp_path / "out" / "report" / "summary.json").read_text())
        assert [r["run"] for r in summary["rows"]] == ["a", "b"]
        assert "report/figures/metrics_comparison.png" in written

    def test_duplicate_labels_rejected(self, tmp_path):
        write_run(tmp_path / "run")
        with pytest.raises(ReportError, match="duplicate"):
            render_report(tmp_path / "out", [("x", str(tmp_path / "run")),
                                             ("x", str(tmp_path / "run"))])

    def test_no_runs_rejected(self, tmp_path):
        with pytest.raises(ReportError, match="at least one"):
            render_report(tmp_path / "out", [])

    def test_byte_identical_re_render(self, tmp_path):
        write_run(tmp_path / "run")
        render_report(tmp_path / "o1", [("base", str(tmp_path / "run"))])
        render_report(tmp_path / "o2", [("base", str(tmp_path / "run"))])
        for rel in ["report/summary.csv", "report/figures/metrics_comparison.png"]:
            a = (tmp_path / "o1" / rel).read_bytes()
            b = (tmp_path / "o2" / rel).read_bytes()
            assert a == b

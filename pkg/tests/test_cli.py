from __future__ import annotations

import csv
import json

from PIL import Image

from synthvit.cli import main
from synthvit.evaluation import aggregate_scores, EvalCase, EvalResult
from synthvit.plotting import plot_category_scores, plot_rejections
from tests.conftest import EXAMPLE_CONFIG


def _run(tmp_path, *extra):
    return main(["run", "--config", str(EXAMPLE_CONFIG), "--mock", "--output-dir", str(tmp_path / "job"), *extra])


def test_specs_validate(capsys):
    assert main(["specs", "validate"]) == 0
    assert "11 abilities, total target 126000" in capsys.readouterr().out


def test_run_dry_run(tmp_path, capsys):
    assert _run(tmp_path, "--dry-run") == 0
    out = capsys.readouterr().out
    assert "stage 1" in out and "(30 samples)" in out and "(8 samples)" in out
    assert not (tmp_path / "job" / "manifest.jsonl").exists()


def test_run_then_rerun_and_resume(tmp_path, capsys):
    assert _run(tmp_path) == 0
    assert "0 violations" in capsys.readouterr().out
    # a second plain run refuses to touch the existing job
    assert _run(tmp_path) == 1
    manifest = tmp_path / "job" / "manifest.jsonl"
    assert main(["run", "--config", str(EXAMPLE_CONFIG), "--mock", "--resume", str(manifest)]) == 0


def test_resume_missing_manifest(tmp_path):
    assert _run(tmp_path, "--resume", str(tmp_path / "nope.jsonl")) == 1


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("filter:\n  max_kws: 3\n")
    assert main(["run", "--config", str(bad), "--mock"]) == 1
    assert "filter.max_kws" in capsys.readouterr().err


def test_stagewise_commands(tmp_path):
    out = tmp_path / "job"
    common = ["--config", str(EXAMPLE_CONFIG), "--mock", "--output-dir", str(out)]
    assert main(["pools", "gen", *common]) == 0
    assert (out / "pools" / "color.json").exists()
    assert main(["prompts", "gen", *common, "--ability", "color", "--n", "6"]) == 0
    prompts = out / "prompts" / "color.jsonl"
    assert prompts.exists()
    assert main(["images", "gen", *common, "--prompts", str(prompts)]) == 0
    images = out / "prompts" / "color.images.jsonl"
    assert main(["dialogues", "gen", *common, "--images", str(images)]) == 0
    dialogues = out / "prompts" / "color.dialogues.jsonl"
    n = len(dialogues.read_text().splitlines())
    # only color samples, so the stage-1 plan stays incomplete
    assert main(["assemble", *common, "--dialogues", str(dialogues)]) == 2
    data = json.loads((out / "stage1.json").read_text())
    assert len(data) == n > 0


def test_eval_and_report(tmp_path):
    bench = tmp_path / "bench.jsonl"
    rows = [{"categories": ["color", "counting"]}]
    answers = []
    for cat in ("color", "counting"):
        for i in range(3):
            cid = f"{cat}-{i}"
            rows.append({"case_id": cid, "category": cat, "question": "Q?", "reference_answer": f"It is {cat} {i}."})
            answers.append({"case_id": cid, "answer": f"It is {cat} {i}." if i else "No idea."})
    bench.write_text("".join(json.dumps(r) + "\n" for r in rows))
    ans = tmp_path / "answers.jsonl"
    ans.write_text("".join(json.dumps(r) + "\n" for r in answers))
    out = tmp_path / "eval"
    assert main(["eval", "--benchmark", str(bench), "--answers", str(ans), "--mock", "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    assert [c["category"] for c in report["categories"]] == ["color", "counting"]
    assert len(report["results"]) == 6 and all(r["judge_raw"] for r in report["results"])
    assert (out / "eval_scores.png").exists()

    job = tmp_path / "job"
    assert main(["run", "--config", str(EXAMPLE_CONFIG), "--mock", "--output-dir", str(job)]) == 0
    rep = tmp_path / "report"
    assert main(["report", "--job", str(job), "--eval", str(out / "eval_report.json"), "--out", str(rep)]) == 0
    with open(rep / "job_counts.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["ability_id", "item", "count"]
    assert ["color", "samples", "10"] in table
    assert Image.open(rep / "job_rejections.png").format == "PNG"
    assert (rep / "eval_scores.csv").read_text() == (out / "eval_scores.csv").read_text()


def test_report_needs_input(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_plots_are_deterministic(tmp_path):
    cases = [EvalCase(f"{c}-1", c, (), "q", "r") for c in ("a", "b")]
    summary = aggregate_scores([EvalResult("a-1", "x", 3, ""), EvalResult("b-1", "x", 4, "")], cases)
    p1 = plot_category_scores(summary, tmp_path / "1.png")
    p2 = plot_category_scores(summary, tmp_path / "2.png")
    assert p1.read_bytes() == p2.read_bytes()
    r = plot_rejections({"a": 5}, {"a": {"Duplicate": 2, "TooManyKeywords": 1}}, tmp_path / "r.png")
    assert Image.open(r).size[0] > 0

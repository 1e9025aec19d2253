"""End-to-end CLI behavior against fixtures and scripted replies."""

import json
import socket

import pytest

from conftest import happy_path_script, make_record, plan_text
from dagent.cli import main
from dagent.tools import MockWebEnvironment, SearchResult
from dagent.trajectory import TERM_BUDGET_EXHAUSTED, write_record


def write_script(path, entries):
    path.write_text(json.dumps(entries), encoding="utf-8")
    return str(path)


def script_entry(script, judge_verdict=None):
    entry = {"replies": [{"purpose": p, "reply": r} for p, r in script]}
    if judge_verdict is not None:
        entry["judge_reply"] = json.dumps({"rationale": "r", "judgement": judge_verdict})
    return entry


@pytest.fixture
def cli_fixtures(tmp_path):
    root = tmp_path / "fixtures"
    MockWebEnvironment.add_search_fixture(
        root, "q", [SearchResult("Hit", "snippet", "https://e.org/hit")]
    )
    return root


class TestRun:
    def test_single_task(self, tmp_path, cli_fixtures, capsys):
        script = write_script(tmp_path / "script.json", {"task": script_entry(happy_path_script("A"))})
        out = tmp_path / "out"
        code = main(
            ["run", "--task", "What is q?", "--mock", str(cli_fixtures), "--script", script, "--out", str(out)]
        )
        assert code == 0
        record = json.loads((out / "task.json").read_text())
        assert record["termination"] == "final_answer"
        report = json.loads((out / "report.json").read_text())
        assert report["tasks"][0]["steps"] >= 1

    def test_benchmark_pass_at_1(self, tmp_path, cli_fixtures):
        # Ten tasks, seven scripted-correct verdicts: pass@1 = 0.70.
        tasks_file = tmp_path / "tasks.jsonl"
        rows, scripts = [], {}
        for i in range(10):
            task_id = f"t{i:02d}"
            rows.append({"id": task_id, "question": f"Question {i}?", "answer": "A"})
            verdict = "correct" if i < 7 else "incorrect"
            scripts[task_id] = script_entry(happy_path_script("A"), judge_verdict=verdict)
        tasks_file.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        script = write_script(tmp_path / "script.json", scripts)
        out = tmp_path / "out"
        code = main(
            ["run", "--task-file", str(tasks_file), "--mock", str(cli_fixtures), "--script", script, "--out", str(out)]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["aggregate"]["pass_at_1"] == 0.70
        assert len(list(out.glob("t*.json"))) == 10

    def test_partial_failure_recorded_not_fatal(self, tmp_path, cli_fixtures):
        tasks_file = tmp_path / "tasks.jsonl"
        tasks_file.write_text(
            json.dumps({"id": "good", "question": "Q?"})
            + "\n"
            + json.dumps({"id": "bad", "question": "Q?"}),
            encoding="utf-8",
        )
        scripts = {
            "good": script_entry(happy_path_script("A")),
            "bad": {"replies": [{"purpose": "plan", "reply": "not a plan"}]},
        }
        script = write_script(tmp_path / "script.json", scripts)
        out = tmp_path / "out"
        code = main(
            ["run", "--task-file", str(tasks_file), "--mock", str(cli_fixtures), "--script", script, "--out", str(out)]
        )
        assert code == 1  # a hard error happened, but the batch finished
        report = json.loads((out / "report.json").read_text())
        by_id = {r["id"]: r for r in report["tasks"]}
        assert by_id["good"]["termination"] == "final_answer"
        assert "error" in by_id["bad"]

    def test_defaults_mirror_standard_parameters(self, tmp_path, cli_fixtures):
        script = write_script(tmp_path / "script.json", {"task": script_entry(happy_path_script("A"))})
        out = tmp_path / "out"
        main(["run", "--task", "Q?", "--mock", str(cli_fixtures), "--script", script, "--out", str(out)])
        config = json.loads((out / "task.json").read_text())["config"]
        assert config["max_steps"] == 40
        assert config["summary_interval"] == 8
        assert config["policy"]["max_parallel_goals"] == 5
        assert config["policy"]["max_tool_calls_per_step"] == 5

    def test_flag_overrides(self, tmp_path, cli_fixtures):
        script = write_script(tmp_path / "script.json", {"task": script_entry(happy_path_script("A"))})
        out = tmp_path / "out"
        main(
            [
                "run", "--task", "Q?", "--mock", str(cli_fixtures), "--script", script,
                "--out", str(out), "--max-steps", "12", "--summary-interval", "9",
                "--max-parallel", "3", "--max-tool-calls", "10",
            ]
        )
        config = json.loads((out / "task.json").read_text())["config"]
        assert config["max_steps"] == 12
        assert config["summary_interval"] == 9
        assert config["policy"]["max_parallel_goals"] == 3
        assert config["policy"]["max_tool_calls_per_step"] == 10

    def test_env_between_flags_and_defaults(self, tmp_path, cli_fixtures, monkeypatch):
        monkeypatch.setenv("DAGENT_MAX_STEPS", "17")
        script = write_script(tmp_path / "script.json", {"task": script_entry(happy_path_script("A"))})
        out = tmp_path / "out"
        main(["run", "--task", "Q?", "--mock", str(cli_fixtures), "--script", script, "--out", str(out)])
        assert json.loads((out / "task.json").read_text())["config"]["max_steps"] == 17

    def test_precedence_flags_env_config_defaults(self, tmp_path, cli_fixtures, monkeypatch):
        config_file = tmp_path / "config.json"
        config_file.write_text(
            json.dumps({"engine": {"max_steps": 20, "summary_interval": 7, "mode": "aggressive"}}),
            encoding="utf-8",
        )
        monkeypatch.setenv("DAGENT_MAX_STEPS", "30")  # env beats config file
        script = write_script(tmp_path / "script.json", {"task": script_entry(happy_path_script("A"))})
        out = tmp_path / "out"
        main(
            ["run", "--task", "Q?", "--mock", str(cli_fixtures), "--script", script,
             "--out", str(out), "--config", str(config_file), "--max-steps", "11"]  # flag beats env
        )
        config = json.loads((out / "task.json").read_text())["config"]
        assert config["max_steps"] == 11
        assert config["summary_interval"] == 7  # config file beats default
        assert config["policy"]["mode"] == "aggressive"
        assert config["policy"]["max_parallel_goals"] == 5  # untouched default

    def test_mock_mode_is_hermetic(self, tmp_path, cli_fixtures, monkeypatch):
        # Any socket use fails loudly; the mock run must still succeed.
        def no_network(*args, **kwargs):
            raise AssertionError("network touched during --mock run")

        monkeypatch.setattr(socket, "socket", no_network)
        monkeypatch.setattr(socket, "create_connection", no_network)
        script = write_script(
            tmp_path / "script.json", {"task": script_entry(happy_path_script("A"), judge_verdict="correct")}
        )
        out = tmp_path / "out"
        code = main(["run", "--task", "Q?", "--mock", str(cli_fixtures), "--script", script, "--out", str(out)])
        assert code == 0


def run_benchmark(tmp_path, cli_fixtures, n=3, verdicts=None):
    tasks_file = tmp_path / "tasks.jsonl"
    rows, scripts = [], {}
    for i in range(n):
        task_id = f"t{i:02d}"
        rows.append({"id": task_id, "question": f"Q{i}?", "answer": "A"})
        scripts[task_id] = script_entry(happy_path_script("A"))
    tasks_file.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
    script = write_script(tmp_path / "script.json", scripts)
    out = tmp_path / "out"
    assert (
        main(["run", "--task-file", str(tasks_file), "--mock", str(cli_fixtures), "--script", script,
              "--out", str(out), "--no-judge"])
        == 0
    )
    return out


class TestExport:
    def test_export_with_scripted_judge(self, tmp_path, cli_fixtures):
        out = run_benchmark(tmp_path, cli_fixtures, n=3)
        judge_script = tmp_path / "judge.json"
        judge_script.write_text(
            json.dumps(
                {
                    f"t{i:02d}": json.dumps({"rationale": "r", "judgement": v})
                    for i, v in enumerate(["correct", "incorrect", "correct"])
                }
            ),
            encoding="utf-8",
        )
        sft_dir = tmp_path / "sft"
        code = main(["export", str(out), "--out", str(sft_dir), "--judge-script", str(judge_script)])
        assert code == 0
        kept = [json.loads(l) for l in (sft_dir / "kept.jsonl").read_text().splitlines()]
        assert len(kept) == 2
        for dialogue in kept:
            assert dialogue["messages"][0]["role"] == "system"
            assert dialogue["messages"][2]["content"].startswith("<plan>")
        summary = json.loads((sft_dir / "summary.json").read_text())
        assert summary["kept"] == 2 and summary["stage1_rejected"] == 1

    def test_export_no_judge_validates_format_only(self, tmp_path, cli_fixtures):
        out = run_benchmark(tmp_path, cli_fixtures, n=2)
        sft_dir = tmp_path / "sft"
        code = main(["export", str(out), "--out", str(sft_dir), "--no-judge"])
        assert code == 0
        summary = json.loads((sft_dir / "summary.json").read_text())
        assert summary["kept"] == 2

    def test_export_requires_judge_when_golds_present(self, tmp_path, cli_fixtures):
        out = run_benchmark(tmp_path, cli_fixtures, n=1)
        assert main(["export", str(out)]) == 2  # ConfigError

    def test_mixed_directory_exports_answer_terminated_only(self, tmp_path):
        out = tmp_path / "runs"
        out.mkdir()
        write_record(make_record(task_id="a"), out / "a.json")
        write_record(make_record(task_id="b"), out / "b.json")
        write_record(
            make_record(task_id="c", termination=TERM_BUDGET_EXHAUSTED), out / "c.json"
        )
        sft_dir = tmp_path / "sft"
        assert main(["export", str(out), "--out", str(sft_dir), "--no-judge"]) == 0
        summary = json.loads((sft_dir / "summary.json").read_text())
        assert summary["kept"] == 2
        assert summary["rejected_by_reason"] == {"not_answer_terminated": 1}


class TestReport:
    def test_metrics_and_histogram(self, tmp_path, cli_fixtures, capsys):
        out = run_benchmark(tmp_path, cli_fixtures, n=2)
        report_dir = tmp_path / "report"
        assert main(["report", str(out), "--out", str(report_dir)]) == 0
        metrics = json.loads((report_dir / "metrics.json").read_text())
        assert metrics["trajectories"] == 2
        assert metrics["total_steps"] == 4  # two 2-step runs
        histogram = (report_dir / "histogram.csv").read_text().splitlines()
        assert histogram[0] == "tool_calls_in_step,step_count"
        assert histogram[1] == "1,4"

    def test_rerun_byte_identical(self, tmp_path, cli_fixtures):
        out = run_benchmark(tmp_path, cli_fixtures, n=2)
        report_dir = tmp_path / "report"
        main(["report", str(out), "--out", str(report_dir)])
        first = (report_dir / "metrics.json").read_bytes(), (report_dir / "histogram.csv").read_bytes()
        main(["report", str(out), "--out", str(report_dir)])
        second = (report_dir / "metrics.json").read_bytes(), (report_dir / "histogram.csv").read_bytes()
        assert first == second


class TestValidatePlan:
    def test_valid_plan(self, tmp_path, capsys):
        plan_file = tmp_path / "plan.txt"
        plan_file.write_text(plan_text([2, 1]), encoding="utf-8")
        assert main(["validate-plan", str(plan_file)]) == 0
        assert "2 goal(s)" in capsys.readouterr().out

    def test_malformed_plan(self, tmp_path, capsys):
        plan_file = tmp_path / "plan.txt"
        plan_file.write_text("## Goal 1: A\n- Path 1.1: x\n", encoding="utf-8")
        assert main(["validate-plan", str(plan_file)]) == 1
        assert "malformed" in capsys.readouterr().out

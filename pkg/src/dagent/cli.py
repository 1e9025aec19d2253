"""Operator entry point: run tasks, export training dialogues, report metrics.

Subcommands:

* ``run`` — execute one task or a JSONL benchmark file, writing one
  trajectory JSON per task plus an aggregate report. Fully offline with
  ``--mock <fixtures>`` and ``--script <replies>``.
* ``export`` — convert a directory of trajectories to dialogue JSONL,
  applying the two-stage filter (answer judge, then format checks).
* ``report`` — aggregate step/tool-call metrics and a per-step
  histogram CSV across a directory of trajectories.
* ``validate-plan`` — parse a plan text file and check it is acyclic.

Setting precedence is flags > environment > config file > defaults; the
defaults are the standard run parameters (40 steps, summary every 8,
5 parallel goals, 5 tool calls per step).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path as FsPath
from typing import Optional

from .backend import (
    HttpChatBackend,
    ModelBackend,
    ScriptedBackend,
    judge as run_judge,
    page_summarizer,
)
from .engine import Engine, EngineConfig
from .errors import ConfigError, DagentError, JudgeParseError, MalformedPlan
from .plan import parse_plan, validate_dag
from .scheduler import SchedulingPolicy
from .tools import (
    ToolRegistry,
    live_crawl_spec,
    live_search_spec,
    mock_registry,
    passthrough_summarizer,
)
from .trajectory import (
    FilterResult,
    TERM_FINAL_ANSWER,
    TrajectoryRecord,
    compute_metrics,
    export_sft,
    filter_corpus,
    read_record,
    record_to_json,
    validate_sft,
    write_dialogues_jsonl,
)

ENV_PREFIX = "DAGENT_"


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        return json.loads(FsPath(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")


def _resolve(flag, env_name: str, config_value, default, cast=int):
    """flags > env > config file > defaults."""
    if flag is not None:
        return flag
    env = os.environ.get(ENV_PREFIX + env_name)
    if env is not None:
        return cast(env)
    if config_value is not None:
        return cast(config_value)
    return default


def _engine_config(args, config: dict) -> EngineConfig:
    section = config.get("engine", {})
    policy = SchedulingPolicy(
        mode=_resolve(getattr(args, "mode", None), "MODE", section.get("mode"), "strict", str),
        max_parallel_goals=_resolve(args.max_parallel, "MAX_PARALLEL", section.get("max_parallel_goals"), 5),
        max_tool_calls_per_step=_resolve(
            args.max_tool_calls, "MAX_TOOL_CALLS", section.get("max_tool_calls_per_step"), 5
        ),
    )
    return EngineConfig(
        max_steps=_resolve(args.max_steps, "MAX_STEPS", section.get("max_steps"), 40),
        summary_interval=_resolve(
            args.summary_interval, "SUMMARY_INTERVAL", section.get("summary_interval"), 8
        ),
        policy=policy,
        per_call_timeout=_resolve(args.timeout, "TIMEOUT", section.get("per_call_timeout"), 60.0, float),
        max_concurrent_dispatch=_resolve(
            args.max_concurrent, "MAX_CONCURRENT", section.get("max_concurrent_dispatch"), 5
        ),
        context_char_budget=_resolve(
            args.context_budget, "CONTEXT_BUDGET", section.get("context_char_budget"), None
        ),
    )


def _load_tasks(args) -> list[dict]:
    if args.task:
        return [{"id": "task", "question": args.task}]
    tasks = []
    seen = set()
    with open(args.task_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            task_id = str(row.get("id", ""))
            question = str(row.get("question", ""))
            if not task_id or task_id in seen:
                raise ConfigError(f"{args.task_file}:{line_no}: task ids must be unique and non-empty")
            if not question.strip():
                raise ConfigError(f"{args.task_file}:{line_no}: question must be non-empty")
            seen.add(task_id)
            tasks.append({"id": task_id, "question": question, "answer": row.get("answer")})
    if not tasks:
        raise ConfigError(f"no tasks in {args.task_file}")
    return tasks


def _load_script(path: str) -> dict[str, dict]:
    data = json.loads(FsPath(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        return {"default": {"replies": data}}
    normalized = {}
    for key, value in data.items():
        normalized[key] = {"replies": value} if isinstance(value, list) else value
    return normalized


def _scripted_backend(scripts: dict[str, dict], task_id: str) -> ScriptedBackend:
    entry = scripts.get(task_id) or scripts.get("default")
    if entry is None:
        raise ConfigError(f"script file has no entry for task {task_id!r} and no 'default'")
    replies = [(item["purpose"], item["reply"]) for item in entry.get("replies", [])]
    return ScriptedBackend(replies)


def _http_backend(section: dict, what: str) -> ModelBackend:
    if not section.get("base_url") or not section.get("model"):
        raise ConfigError(f"{what} backend needs base_url and model in the config file")
    return HttpChatBackend(
        base_url=section["base_url"],
        model=section["model"],
        api_key_env=section.get("api_key_env"),
        temperature=float(section.get("temperature", 1.0)),
        extra=section.get("extra"),
    )


def _live_registry(config: dict, backend: ModelBackend) -> ToolRegistry:
    search = config.get("search", {})
    key_env = search.get("api_key_env", "SERPER_API_KEY")
    api_key = os.environ.get(key_env, "")
    if not api_key:
        raise ConfigError(f"live mode needs the search API key env var {key_env} set")
    summarizer_cfg = config.get("summarizer")
    summarizer_backend = _http_backend(summarizer_cfg, "summarizer") if summarizer_cfg else backend
    crawl = config.get("crawl", {})
    return ToolRegistry(
        [
            live_search_spec(api_key, endpoint=search.get("endpoint", "https://google.serper.dev/search")),
            live_crawl_spec(
                page_summarizer(summarizer_backend),
                reader_base=crawl.get("reader_base", "https://r.jina.ai"),
            ),
        ]
    )


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = _load_config(args.config)
    engine_config = _engine_config(args, config)
    tasks = _load_tasks(args)
    out_dir = FsPath(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mock_mode = args.mock is not None
    scripts: dict[str, dict] = {}
    if mock_mode:
        if not args.script:
            raise ConfigError("--mock runs need --script with the scripted backend replies")
        scripts = _load_script(args.script)

    def run_one(task: dict) -> dict:
        task_id = task["id"]
        try:
            if mock_mode:
                backend = _scripted_backend(scripts, task_id)
                registry = mock_registry(args.mock, passthrough_summarizer)
                clock = lambda: 0.0  # pinned durations keep mock runs byte-stable
            else:
                backend = _http_backend(config.get("backend", {}), "model")
                registry = _live_registry(config, backend)
                clock = None
            engine = Engine(engine_config, backend, registry, clock=clock)
            record = engine.run(task["question"], task_id=task_id, gold_answer=task.get("answer"))
            (out_dir / f"{task_id}.json").write_text(record_to_json(record), encoding="utf-8")

            judged = None
            if task.get("answer") and not args.no_judge and record.final_answer:
                judge_backend = _judge_backend(args, config, scripts, task_id)
                if judge_backend is not None:
                    try:
                        verdict = run_judge(
                            task["question"], task["answer"], record.final_answer, judge_backend
                        )
                        judged = verdict.judgement
                    except JudgeParseError as exc:
                        judged = f"judge_error: {exc}"
            metrics = compute_metrics(record)
            return {
                "id": task_id,
                "termination": record.termination,
                "judged": judged,
                "steps": metrics.total_steps,
                "tool_calls": metrics.total_tool_calls,
            }
        except DagentError as exc:
            return {"id": task_id, "error": f"{type(exc).__name__}: {exc}"}

    if args.task_parallelism > 1:
        with ThreadPoolExecutor(max_workers=args.task_parallelism) as pool:
            rows = list(pool.map(run_one, tasks))
    else:
        rows = [run_one(t) for t in tasks]

    judged_rows = [r for r in rows if r.get("judged") in ("correct", "incorrect")]
    correct = sum(1 for r in judged_rows if r["judged"] == "correct")
    ok_rows = [r for r in rows if "error" not in r]
    aggregate = {
        "tasks": len(rows),
        "errors": len(rows) - len(ok_rows),
        "pass_at_1": (correct / len(judged_rows)) if judged_rows else None,
        "mean_steps": (sum(r["steps"] for r in ok_rows) / len(ok_rows)) if ok_rows else None,
        "mean_tool_calls_per_step": (
            sum(r["tool_calls"] / r["steps"] for r in ok_rows if r["steps"]) / len(ok_rows)
        )
        if ok_rows and all(r["steps"] for r in ok_rows)
        else None,
    }
    report = {"tasks": rows, "aggregate": aggregate}
    (out_dir / "report.json").write_text(
        json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(f"ran {len(rows)} task(s), {aggregate['errors']} error(s)", file=sys.stderr)
    if aggregate["pass_at_1"] is not None:
        print(f"pass@1 = {aggregate['pass_at_1']:.2f}", file=sys.stderr)
    return 0 if aggregate["errors"] == 0 else 1


def _judge_backend(args, config: dict, scripts: dict, task_id: str) -> Optional[ModelBackend]:
    if args.mock is not None:
        entry = scripts.get(task_id) or scripts.get("default") or {}
        reply = entry.get("judge_reply")
        return ScriptedBackend([("judge", reply)]) if reply else None
    judge_cfg = config.get("judge")
    return _http_backend(judge_cfg, "judge") if judge_cfg else None


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _read_trajectory_dir(directory: str) -> list[TrajectoryRecord]:
    paths = sorted(p for p in FsPath(directory).glob("*.json") if p.name != "report.json")
    records = []
    for path in paths:
        try:
            records.append(read_record(path))
        except (KeyError, json.JSONDecodeError):
            continue  # not a trajectory file
    return records


def cmd_export(args) -> int:
    config = _load_config(args.config)
    records = _read_trajectory_dir(args.dir)
    if not records:
        raise ConfigError(f"no trajectory JSON files under {args.dir}")
    out_dir = FsPath(args.out or (FsPath(args.dir) / "sft"))
    out_dir.mkdir(parents=True, exist_ok=True)

    golds_present = all(r.gold_answer for r in records)
    judge_backend: Optional[ModelBackend] = None
    if golds_present and not args.no_judge:
        if args.judge_script:
            mapping = json.loads(FsPath(args.judge_script).read_text(encoding="utf-8"))
            try:
                replies = [("judge", mapping[r.task_id]) for r in records]
            except KeyError as exc:
                raise ConfigError(f"judge script has no reply for task {exc}")
            judge_backend = ScriptedBackend(replies)
        elif config.get("judge"):
            judge_backend = _http_backend(config["judge"], "judge")
        else:
            raise ConfigError(
                "gold answers present: provide --judge-script or a judge backend "
                "in the config, or pass --no-judge to skip correctness filtering"
            )

    if judge_backend is not None:
        result = filter_corpus(records, judge_backend)
    else:
        kept, rejected = [], []
        for record in records:
            if record.termination != TERM_FINAL_ANSWER:
                rejected.append((record, "not_answer_terminated"))
                continue
            reasons = validate_sft(export_sft(record))
            if reasons:
                rejected.append((record, reasons[0]))
            else:
                kept.append(record)
        result = FilterResult(
            kept=kept,
            rejected=rejected,
            counts={
                "input": len(records),
                "stage1_rejected": 0,
                "stage2_rejected": len(rejected),
                "kept": len(kept),
            },
        )

    write_dialogues_jsonl((export_sft(r) for r in result.kept), out_dir / "kept.jsonl")
    with open(out_dir / "rejected.jsonl", "w", encoding="utf-8") as fh:
        for record, reason in result.rejected:
            fh.write(json.dumps({"task_id": record.task_id, "reason": reason}, ensure_ascii=False) + "\n")
    by_reason: dict[str, int] = {}
    for _, reason in result.rejected:
        key = reason.split(":")[0]
        by_reason[key] = by_reason.get(key, 0) + 1
    summary = dict(result.counts)
    summary["rejected_by_reason"] = dict(sorted(by_reason.items()))
    (out_dir / "summary.json").write_text(
        json.dumps(summary, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"kept {result.counts['kept']}/{result.counts['input']} "
        f"(stage 1 dropped {result.counts['stage1_rejected']}, "
        f"stage 2 dropped {result.counts['stage2_rejected']})",
        file=sys.stderr,
    )
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args) -> int:
    records = _read_trajectory_dir(args.dir)
    if not records:
        raise ConfigError(f"no trajectory JSON files under {args.dir}")
    out_dir = FsPath(args.out or (FsPath(args.dir) / "report"))
    out_dir.mkdir(parents=True, exist_ok=True)

    per_task = []
    histogram: dict[int, int] = {}
    total_steps = 0
    total_calls = 0
    for record in records:
        metrics = compute_metrics(record)
        total_steps += metrics.total_steps
        total_calls += metrics.total_tool_calls
        for k, v in metrics.per_step_histogram.items():
            histogram[k] = histogram.get(k, 0) + v
        per_task.append(
            {
                "id": record.task_id,
                "termination": record.termination,
                "steps": metrics.total_steps,
                "tool_calls": metrics.total_tool_calls,
                "tool_calls_per_step": float(metrics.tool_calls_per_step),
            }
        )

    pooled = Fraction(total_calls, total_steps) if total_steps else Fraction(0)
    with_steps = [row for row in per_task if row["steps"]]
    mean_ratio = (
        sum(row["tool_calls_per_step"] for row in with_steps) / len(with_steps) if with_steps else 0.0
    )
    report = {
        "trajectories": len(records),
        "total_steps": total_steps,
        "total_tool_calls": total_calls,
        "pooled_tool_calls_per_step": float(pooled),
        "pooled_tool_calls_per_step_exact": f"{pooled.numerator}/{pooled.denominator}",
        "mean_steps": total_steps / len(records),
        "mean_tool_calls_per_step": mean_ratio,
        "per_task": per_task,
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(report, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    lines = ["tool_calls_in_step,step_count"]
    lines += [f"{k},{histogram[k]}" for k in sorted(histogram)]
    (out_dir / "histogram.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"tool calls per step: {float(pooled):.2f} (pooled over {len(records)} trajectories)")
    return 0


# ---------------------------------------------------------------------------
# validate-plan
# ---------------------------------------------------------------------------

def cmd_validate_plan(args) -> int:
    text = FsPath(args.file).read_text(encoding="utf-8")
    try:
        graph = parse_plan(text)
    except MalformedPlan as exc:
        print(f"malformed plan: {exc}")
        return 1
    cycle = validate_dag(graph)
    if cycle is not None:
        print(f"cycle detected: {cycle}")
        return 1
    paths = ", ".join(str(len(g.paths)) for g in graph.goals)
    print(f"ok: {len(graph.goals)} goal(s) with path counts ({paths})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagent", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one task or a JSONL benchmark file")
    group = run_p.add_mutually_exclusive_group(required=True)
    group.add_argument("--task", help="task text for a single run")
    group.add_argument("--task-file", help="JSONL rows {id, question, answer?}")
    run_p.add_argument("--out", default="runs", help="output directory for trajectories")
    run_p.add_argument("--config", help="JSON config file (backend/judge/summarizer/search/engine)")
    run_p.add_argument("--mock", metavar="FIXTURES", help="fixtures directory; run offline")
    run_p.add_argument("--script", help="scripted backend replies (required with --mock)")
    run_p.add_argument("--max-steps", type=int, default=None)
    run_p.add_argument("--summary-interval", type=int, default=None)
    run_p.add_argument("--max-parallel", type=int, default=None)
    run_p.add_argument("--max-tool-calls", type=int, default=None)
    run_p.add_argument("--mode", choices=["strict", "aggressive"], default=None)
    run_p.add_argument("--timeout", type=float, default=None, help="per tool call timeout, seconds")
    run_p.add_argument("--max-concurrent", type=int, default=None, help="dispatch pool size")
    run_p.add_argument("--context-budget", type=int, default=None, help="character budget before elision")
    run_p.add_argument("--task-parallelism", type=int, default=1)
    run_p.add_argument("--no-judge", action="store_true")
    run_p.set_defaults(fn=cmd_run)

    export_p = sub.add_parser("export", help="export trajectories to dialogue JSONL")
    export_p.add_argument("dir", help="directory holding trajectory JSON files")
    export_p.add_argument("--out", help="output directory (default <dir>/sft)")
    export_p.add_argument("--config", help="JSON config file with a judge backend")
    export_p.add_argument("--judge-script", help="JSON map of task_id to scripted judge reply")
    export_p.add_argument("--no-judge", action="store_true", help="skip the correctness stage")
    export_p.set_defaults(fn=cmd_export)

    report_p = sub.add_parser("report", help="aggregate metrics over trajectories")
    report_p.add_argument("dir", help="directory holding trajectory JSON files")
    report_p.add_argument("--out", help="output directory (default <dir>/report)")
    report_p.set_defaults(fn=cmd_report)

    validate_p = sub.add_parser("validate-plan", help="parse and cycle-check a plan text file")
    validate_p.add_argument("file")
    validate_p.set_defaults(fn=cmd_validate_plan)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DagentError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Shared builders for scripted runs, fixture tools, and synthetic records."""

from __future__ import annotations

import json
import random
import string

import pytest

from dagent.backend import ActionEnvelope, PURPOSE_ACT, PURPOSE_PLAN, PURPOSE_SUMMARIZE, ScriptedBackend
from dagent.engine import Engine, EngineConfig
from dagent.scheduler import Frontier, SchedulingPolicy
from dagent.tools import (
    MockWebEnvironment,
    Observation,
    SearchResult,
    ToolCall,
    mock_registry,
    passthrough_summarizer,
)
from dagent.trajectory import StepRecord, TERM_FINAL_ANSWER, TrajectoryRecord

ZERO_CLOCK = lambda: 0.0  # noqa: E731 - pins every duration to 0 for byte-stable runs


def plan_text(goal_paths: list[int]) -> str:
    """A well-formed plan with the given number of paths per goal."""
    lines = []
    for g, n_paths in enumerate(goal_paths, start=1):
        lines.append(f"## Goal {g}: Goal {g}")
        for p in range(1, n_paths + 1):
            lines.append(f"- Path {g}.{p}: approach {g}.{p}")
            lines.append(f"- Success: criteria {g}.{p}")
        lines.append("")
    return "\n".join(lines)


def act_search(queries: list[str], think: str = "advance all goals") -> str:
    calls = [{"name": "web_search", "arguments": {"query": q}} for q in queries]
    return json.dumps({"think": think, "tools": calls})


def act_final(answer: str, think: str = "answer is known") -> str:
    return json.dumps(
        {"think": think, "tools": [{"name": "final_answer", "arguments": {"answer": answer}}]}
    )


def summary_all_in_progress(n_goals: int) -> str:
    """A parseable progress summary that changes nothing."""
    sections = []
    for g in range(1, n_goals + 1):
        sections.append(f"### Goal {g}: Goal {g}\n- Status: In Progress\n- Path Analysis: still collecting")
    return "## Plan Summary\nWorking through all goals.\n\n## Execution Status Analysis\n" + "\n\n".join(
        sections
    )


def summary_all_completed(n_goals: int) -> str:
    sections = []
    for g in range(1, n_goals + 1):
        sections.append(
            f"### Goal {g}: Goal {g}\n- Status: Completed\nGoal {g}: resolved, result is finding {g}"
        )
    return "## Execution Status Analysis\n" + "\n\n".join(sections)


@pytest.fixture
def fixtures_dir(tmp_path):
    root = tmp_path / "fixtures"
    MockWebEnvironment.add_search_fixture(
        root,
        "q",
        [SearchResult(title="Hit", snippet="a snippet", url="https://example.org/hit")],
    )
    return root


def make_engine(script, fixtures_root, **config_kwargs) -> Engine:
    """Engine wired to a scripted backend and fixture tools, zero clock."""
    config_kwargs.setdefault("policy", SchedulingPolicy())
    config = EngineConfig(**config_kwargs)
    backend = ScriptedBackend(script)
    registry = mock_registry(fixtures_root, passthrough_summarizer)
    return Engine(config, backend, registry, clock=ZERO_CLOCK)


def run_scripted(script, fixtures_root, task="What is q?", task_id="task", gold=None, **config_kwargs):
    engine = make_engine(script, fixtures_root, **config_kwargs)
    record = engine.run(task, task_id=task_id, gold_answer=gold)
    return engine, record


def happy_path_script(answer: str = "A"):
    """Plan one goal, search once (fixture hit), then answer."""
    return [
        (PURPOSE_PLAN, plan_text([1])),
        (PURPOSE_ACT, act_search(["q"])),
        (PURPOSE_ACT, act_final(answer)),
    ]


def fanout_script(n_goals: int, n_paths: int, parallel: bool):
    """Synthetic workload: every path is one search that fails (no
    fixture), so each goal walks its fallback chain to exhaustion.

    Parallel mode advances one path of every goal per step; sequential
    mode (max_parallel_goals=1) advances one path of one goal per step.
    Summaries are injected wherever the engine will ask for one
    (multiples of 8 before the final step, with the default interval).
    """
    script = [(PURPOSE_PLAN, plan_text([n_paths] * n_goals))]
    total_steps = n_paths if parallel else n_goals * n_paths
    for step in range(1, total_steps + 1):
        if parallel:
            queries = [f"missing {g}.{step}" for g in range(1, n_goals + 1)]
        else:
            goal = (step - 1) // n_paths + 1
            path = (step - 1) % n_paths + 1
            queries = [f"missing {goal}.{path}"]
        script.append((PURPOSE_ACT, act_search(queries)))
        if step % 8 == 0 and step < total_steps:
            script.append((PURPOSE_SUMMARIZE, summary_all_in_progress(n_goals)))
    return script


def random_envelope(rng: random.Random) -> ActionEnvelope:
    """Seeded generator of valid envelopes for round-trip sweeps.

    Argument values may contain tag-like text (including </tools>);
    phase text stays free of angle brackets, the one reserved spot in
    the tagged grammar.
    """
    phase = rng.choice(["plan", "think", "summary"])
    letters = string.ascii_letters + string.digits + " .,;:!?'\"()[]{}#$%&*+-/=@^_|~"
    arg_letters = letters + "<>"
    text = "".join(rng.choice(letters) for _ in range(rng.randint(0, 80))).strip()
    if rng.random() < 0.2:
        calls = (ToolCall("final_answer", {"answer": "".join(rng.choice(arg_letters) for _ in range(12))}),)
    else:
        calls = tuple(
            ToolCall(
                rng.choice(["web_search", "crawl_page", "tool_x"]),
                {
                    "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 8))): (
                        "</tools>" if rng.random() < 0.02 else ""
                    )
                    + "".join(rng.choice(arg_letters) for _ in range(rng.randint(0, 30)))
                    for _ in range(rng.randint(1, 3))
                },
            )
            for _ in range(rng.randint(1, 5))
        )
    return ActionEnvelope(phase, text, calls)


def make_record(
    task_id: str = "t",
    call_counts: list[int] = (1, 1),
    task_text: str = "What is q?",
    gold_answer=None,
    termination: str = TERM_FINAL_ANSWER,
    final_answer: str = "A",
    plan_goals: int = 1,
    summary_after: int | None = None,
    think_suffix: str = "",
) -> TrajectoryRecord:
    """Synthetic trajectory: a plan step, then action steps with the
    given call counts (the last being final_answer when answer-terminated)."""
    plan = plan_text([1] * plan_goals)
    steps = [StepRecord(0, ActionEnvelope("plan", plan))]
    for i, count in enumerate(call_counts, start=1):
        is_last = i == len(call_counts)
        if is_last and termination == TERM_FINAL_ANSWER:
            calls = (ToolCall("final_answer", {"answer": final_answer}),)
            observations = (Observation(0, final_answer),)
        else:
            calls = tuple(ToolCall("web_search", {"query": f"q{i}.{k}"}) for k in range(count))
            observations = tuple(Observation(k, f"result {i}.{k}") for k in range(count))
        envelope = ActionEnvelope("think", f"step {i}{think_suffix}", calls)
        steps.append(StepRecord(i, envelope, observations, Frontier()))
        if summary_after is not None and i == summary_after:
            steps.append(StepRecord(i, ActionEnvelope("summary", f"summary after {i}")))
    return TrajectoryRecord(
        task_id=task_id,
        task_text=task_text,
        gold_answer=gold_answer,
        plan_versions=(plan,),
        steps=tuple(steps),
        termination=termination,
        final_answer=final_answer if termination == TERM_FINAL_ANSWER else None,
    )

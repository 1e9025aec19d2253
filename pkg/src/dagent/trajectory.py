"""Run records, efficiency metrics, dialogue export and corpus filtering.

A trajectory holds the plan step, every action step with its
observations, any interleaved progress summaries, and the termination
reason. Answer-terminated trajectories export to a role-alternating
dialogue whose assistant messages all follow the tagged envelope
grammar, which is also what the two-stage corpus filter (answer
correctness, then format validity) checks.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path as FsPath
from typing import Iterable, Optional, Sequence

from .backend import (
    ActionEnvelope,
    ModelBackend,
    PHASES,
    judge,
    load_template,
    parse_envelope,
    serialize_tool_calls,
)
from .errors import EnvelopeParseError, ExportError, JudgeParseError
from .plan import NodeId
from .scheduler import Frontier
from .tools import Observation, ToolCall, render_observations

TERM_FINAL_ANSWER = "final_answer"
TERM_PLAN_COMPLETE = "plan_complete"
TERM_BUDGET_EXHAUSTED = "budget_exhausted"

# Published per-step tool-call averages of the two frameworks we compare
# against; kept as documented constants, never recomputed here.
OAGENTS_BASELINE_TOOL_CALLS_PER_STEP = 0.83
OWL_BASELINE_TOOL_CALLS_PER_STEP = 0.85

PHASE_PLAN = "plan"
PHASE_THINK = "think"
PHASE_SUMMARY = "summary"


def task_wrapper(task_text: str) -> str:
    """The user turn that hands the task to the agent."""
    return f"Your task is: {task_text}\n\nNow Begin! Solve the task!"


@dataclass(frozen=True)
class StepRecord:
    """One recorded step: the envelope, its observations, and the
    frontier that was eligible when it ran.

    ``index`` is the action-step counter: 0 for the plan step, t for the
    t-th tool-executing step, and for a summary the index of the step it
    followed. Observation k always corresponds to tool call k.
    """

    index: int
    envelope: ActionEnvelope
    observations: tuple[Observation, ...] = ()
    frontier: Frontier = Frontier()
    duration: float = 0.0

    def __post_init__(self):
        if len(self.observations) != len(self.envelope.tool_calls):
            raise ValueError("observation count must match tool call count")

    @property
    def is_action(self) -> bool:
        return bool(self.envelope.tool_calls)


@dataclass(frozen=True)
class TrajectoryRecord:
    task_id: str
    task_text: str
    gold_answer: Optional[str] = None
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    plan_versions: tuple[str, ...] = ()
    steps: tuple[StepRecord, ...] = ()
    termination: str = TERM_BUDGET_EXHAUSTED
    final_answer: Optional[str] = None
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# JSON round-trip
# ---------------------------------------------------------------------------

def _step_to_dict(step: StepRecord) -> dict:
    return {
        "index": step.index,
        "phase": step.envelope.phase,
        "phase_text": step.envelope.phase_text,
        "tool_calls": [{"name": c.name, "arguments": dict(c.arguments)} for c in step.envelope.tool_calls],
        "observations": [
            {"call_index": o.call_index, "content": o.content, "status": o.status, "latency": o.latency}
            for o in step.observations
        ],
        "frontier": [str(n) for n in step.frontier.nodes],
        "duration": step.duration,
    }


def _step_from_dict(data: dict) -> StepRecord:
    envelope = ActionEnvelope(
        phase=data["phase"],
        phase_text=data["phase_text"],
        tool_calls=tuple(ToolCall(c["name"], dict(c["arguments"])) for c in data["tool_calls"]),
    )
    observations = tuple(
        Observation(o["call_index"], o["content"], o["status"], o["latency"])
        for o in data["observations"]
    )
    frontier = Frontier(tuple(NodeId.parse(s) for s in data["frontier"]))
    return StepRecord(data["index"], envelope, observations, frontier, data["duration"])


def record_to_dict(record: TrajectoryRecord) -> dict:
    out = {
        "task_id": record.task_id,
        "task_text": record.task_text,
        "gold_answer": record.gold_answer,
        "config": record.config,
        "metadata": record.metadata,
        "plan_versions": list(record.plan_versions),
        "steps": [_step_to_dict(s) for s in record.steps],
        "termination": record.termination,
        "final_answer": record.final_answer,
        "wall_time": record.wall_time,
    }
    out["metrics"] = metrics_to_dict(compute_metrics(record))
    return out


def record_from_dict(data: dict) -> TrajectoryRecord:
    return TrajectoryRecord(
        task_id=data["task_id"],
        task_text=data["task_text"],
        gold_answer=data.get("gold_answer"),
        config=data.get("config", {}),
        metadata=data.get("metadata", {}),
        plan_versions=tuple(data.get("plan_versions", ())),
        steps=tuple(_step_from_dict(s) for s in data.get("steps", ())),
        termination=data["termination"],
        final_answer=data.get("final_answer"),
        wall_time=data.get("wall_time", 0.0),
    )


def record_to_json(record: TrajectoryRecord) -> str:
    """Deterministic serialization: identical records give identical bytes."""
    return json.dumps(record_to_dict(record), ensure_ascii=False, indent=2) + "\n"


def record_from_json(text: str) -> TrajectoryRecord:
    return record_from_dict(json.loads(text))


def write_record(record: TrajectoryRecord, path: str | FsPath) -> None:
    FsPath(path).write_text(record_to_json(record), encoding="utf-8")


def read_record(path: str | FsPath) -> TrajectoryRecord:
    return record_from_json(FsPath(path).read_text(encoding="utf-8"))


def write_records_jsonl(records: Iterable[TrajectoryRecord], path: str | FsPath) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False) + "\n")


def read_records_jsonl(path: str | FsPath) -> list[TrajectoryRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Step/tool-call efficiency counters for one trajectory.

    ``tool_calls_per_step`` is exact rational arithmetic, so
    ``tool_calls_per_step * total_steps == total_tool_calls`` holds with
    no tolerance. Plan and summary records execute no tools and are not
    counted as steps.
    """

    total_steps: int
    total_tool_calls: int
    tool_calls_per_step: Fraction
    per_step_histogram: dict[int, int]


def compute_metrics(record: TrajectoryRecord) -> Metrics:
    action_steps = [s for s in record.steps if s.is_action]
    total_steps = len(action_steps)
    total_calls = sum(len(s.envelope.tool_calls) for s in action_steps)
    histogram: dict[int, int] = {}
    for s in action_steps:
        n = len(s.envelope.tool_calls)
        histogram[n] = histogram.get(n, 0) + 1
    ratio = Fraction(total_calls, total_steps) if total_steps else Fraction(0)
    return Metrics(total_steps, total_calls, ratio, dict(sorted(histogram.items())))


def metrics_to_dict(metrics: Metrics) -> dict:
    return {
        "total_steps": metrics.total_steps,
        "total_tool_calls": metrics.total_tool_calls,
        "tool_calls_per_step": float(metrics.tool_calls_per_step),
        "tool_calls_per_step_exact": f"{metrics.tool_calls_per_step.numerator}/{metrics.tool_calls_per_step.denominator}",
        "per_step_histogram": {str(k): v for k, v in metrics.per_step_histogram.items()},
    }


# ---------------------------------------------------------------------------
# Dialogue export
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SftDialogue:
    """Multi-turn training dialogue: system first, then strict user and
    assistant alternation; every assistant message opens with a phase tag
    and carries one tools block."""

    messages: tuple[dict, ...]


def export_sft(record: TrajectoryRecord) -> SftDialogue:
    """Convert an answer-terminated trajectory to dialogue form.

    Each action step becomes an (assistant, user-observation) pair. The
    initial plan text becomes the <plan> tag of the first action message
    and each progress summary becomes the <summary> tag of the action
    that follows it; all other actions keep their own <think> text.
    """
    if record.termination != TERM_FINAL_ANSWER:
        raise ExportError(f"record terminated with {record.termination!r}, not an answer")
    messages: list[dict] = [
        {"role": "system", "content": load_template("sft_system").body},
        {"role": "user", "content": task_wrapper(record.task_text)},
    ]
    pending: Optional[tuple[str, str]] = None
    for step in record.steps:
        phase = step.envelope.phase
        if not step.is_action:
            if phase in (PHASE_PLAN, PHASE_SUMMARY):
                pending = (phase, step.envelope.phase_text)
            continue
        tag, text = pending if pending else (PHASE_THINK, step.envelope.phase_text)
        pending = None
        content = f"<{tag}>{text}</{tag}><tools>{serialize_tool_calls(list(step.envelope.tool_calls))}</tools>"
        messages.append({"role": "assistant", "content": content})
        messages.append(
            {"role": "user", "content": render_observations(list(step.envelope.tool_calls), list(step.observations))}
        )
    if pending is not None:
        raise ExportError("trailing plan/summary with no action step to attach it to")
    if len(messages) < 4:
        raise ExportError("record holds no action steps")
    return SftDialogue(tuple(messages))


REASON_JUDGED_INCORRECT = "judged_incorrect"
REASON_JUDGE_ERROR = "judge_error"
REASON_NOT_ANSWER_TERMINATED = "not_answer_terminated"
REASON_INCOMPLETE_SEGMENTATION = "incomplete_turn_segmentation"
REASON_INVALID_HIERARCHY = "invalid_dialogue_hierarchy"
REASON_MISSING_ACTION_LABELS = "missing_action_labels"

FORMAT_REASONS = (
    REASON_NOT_ANSWER_TERMINATED,
    REASON_INCOMPLETE_SEGMENTATION,
    REASON_INVALID_HIERARCHY,
    REASON_MISSING_ACTION_LABELS,
)


def validate_sft(dialogue: SftDialogue) -> list[str]:
    """Format validation for exported dialogues; returns reason codes.

    invalid_dialogue_hierarchy: roles are wrong (no leading system turn,
    foreign roles, or broken user/assistant alternation).
    incomplete_turn_segmentation: an action pair is cut short (dialogue
    too short, empty message bodies, or no closing observation turn).
    missing_action_labels: an assistant message lacks a leading phase tag
    or a single parseable tools block.
    """
    reasons: list[str] = []
    msgs = list(dialogue.messages)

    hierarchy_ok = bool(msgs) and msgs[0].get("role") == "system"
    for i, msg in enumerate(msgs[1:], start=1):
        expected = "user" if i % 2 == 1 else "assistant"
        if msg.get("role") != expected:
            hierarchy_ok = False
            break
    if not hierarchy_ok:
        reasons.append(REASON_INVALID_HIERARCHY)

    if len(msgs) < 4 or (msgs and msgs[-1].get("role") != "user") or any(
        not str(m.get("content", "")).strip() for m in msgs
    ):
        reasons.append(REASON_INCOMPLETE_SEGMENTATION)

    labels_ok = True
    for msg in msgs:
        if msg.get("role") != "assistant":
            continue
        content = str(msg.get("content", ""))
        if not content.startswith(tuple(f"<{p}>" for p in PHASES)):
            labels_ok = False
            break
        if content.count("<tools>") != 1 or content.count("</tools>") != 1:
            labels_ok = False
            break
        try:
            parse_envelope(content)
        except EnvelopeParseError:
            labels_ok = False
            break
    if not labels_ok:
        reasons.append(REASON_MISSING_ACTION_LABELS)
    return reasons


def write_dialogues_jsonl(dialogues: Iterable[SftDialogue], path: str | FsPath) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps({"messages": list(d.messages)}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Two-stage corpus filtering
# ---------------------------------------------------------------------------

@dataclass
class FilterResult:
    kept: list[TrajectoryRecord]
    rejected: list[tuple[TrajectoryRecord, str]]
    counts: dict


def filter_corpus(
    records: Sequence[TrajectoryRecord],
    judge_backend: ModelBackend,
    max_workers: Optional[int] = None,
) -> FilterResult:
    """Keep only trajectories that pass the answer judge and whose
    dialogue export is structurally valid.

    Stage 1 judges every record's final answer against its gold answer
    (judge parse failures reject that record, never the batch). Stage 2
    re-exports survivors and drops format violations. Results preserve
    input order; kept and rejected always partition the input.
    """
    if any(r.gold_answer is None for r in records):
        raise ValueError("filter_corpus requires a gold answer on every record")

    def stage1(record: TrajectoryRecord) -> Optional[str]:
        predicted = record.final_answer or ""
        if not predicted.strip():
            return REASON_NOT_ANSWER_TERMINATED
        try:
            verdict = judge(record.task_text, record.gold_answer, predicted, judge_backend)
        except JudgeParseError as exc:
            return f"{REASON_JUDGE_ERROR}: {exc}"
        return None if verdict.is_correct else REASON_JUDGED_INCORRECT

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            stage1_results = list(pool.map(stage1, records))
    else:
        stage1_results = [stage1(r) for r in records]

    kept: list[TrajectoryRecord] = []
    rejected: list[tuple[TrajectoryRecord, str]] = []
    stage1_rejects = 0
    stage2_rejects = 0
    for record, reason in zip(records, stage1_results):
        if reason is not None:
            rejected.append((record, reason))
            stage1_rejects += 1
            continue
        try:
            dialogue = export_sft(record)
            format_reasons = validate_sft(dialogue)
        except ExportError:
            format_reasons = [REASON_NOT_ANSWER_TERMINATED]
        if format_reasons:
            rejected.append((record, format_reasons[0]))
            stage2_rejects += 1
        else:
            kept.append(record)

    counts = {
        "input": len(records),
        "stage1_rejected": stage1_rejects,
        "stage2_rejected": stage2_rejects,
        "kept": len(kept),
    }
    return FilterResult(kept=kept, rejected=rejected, counts=counts)

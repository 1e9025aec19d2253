"""The step loop: plan, select actions, dispatch in parallel, integrate,
and periodically refine the plan from a model-written progress summary.

Control flow per run:

1. Step 0 asks the planner prompt for a goal/path decomposition and
   parses it; every node starts pending.
2. Each step computes the ready frontier, asks the backend for an action
   envelope, executes all its tool calls concurrently, and appends the
   assistant turn plus one observation turn to the dialogue state.
3. Node completion is conservative: an error observation fails the
   frontier path its call was paired with (position k to position k),
   which exposes the goal's next fallback path. Successful tool output
   alone never resolves a node; resolution arrives through refinement
   summaries or the final answer.
4. Every ``summary_interval`` steps a progress summary is generated and
   parsed; resolved goals leave the pending set, stalled paths become
   terminal, and proposed sub-paths are appended (capped at 5 per goal).
5. The run stops on a final answer, an empty pending set, or the step
   budget; the budget counts tool-executing steps only (the plan step is
   step 0 and summaries piggyback on the step they follow).

With a scripted backend, fixture tools, and a constant clock, a run is
bit-for-bit reproducible regardless of tool completion order.
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .backend import (
    ActionEnvelope,
    DialogueTurn,
    ModelBackend,
    PURPOSE_ACT,
    PURPOSE_PLAN,
    PURPOSE_SUMMARIZE,
    load_template,
    parse_envelope,
    render_prompt,
    render_tool_schemas,
    serialize_envelope,
)
from .errors import CountMismatch, EnvelopeParseError, MalformedPlan, SummaryParseError
from .plan import (
    Goal,
    GoalStatus,
    NodeId,
    Path,
    PathStatus,
    PlanGraph,
    MAX_PATHS_PER_GOAL,
    parse_plan,
    serialize_plan,
)
from .scheduler import (
    Frontier,
    OUTCOME_FAILED,
    SchedulingPolicy,
    mark_complete,
    ready_set,
)
from .tools import FINAL_ANSWER, Observation, ToolRegistry, render_observations
from .trajectory import (
    PHASE_PLAN,
    PHASE_SUMMARY,
    StepRecord,
    TERM_BUDGET_EXHAUSTED,
    TERM_FINAL_ANSWER,
    TERM_PLAN_COMPLETE,
    TrajectoryRecord,
    task_wrapper,
)

logger = logging.getLogger(__name__)

CONTINUE_PROMPT = "Based on the plan/summary and previous conversations, continue solving the task!"

FORMAT_REMINDER = (
    "Your previous reply could not be parsed. Answer again using exactly this JSON shape: "
    '{"think": "...", "tools": [{"name": "...", "arguments": {...}}]} with 1 to 5 tool calls, '
    "and nothing else."
)

PLAN_REMINDER = (
    "Your previous plan did not follow the required output format. Rewrite it using only "
    "'## Goal N: ...' headings (1-5 goals) with '- Path N.M: ...' and '- Success: ...' lines "
    "(1-5 paths per goal)."
)

ELISION_MARKER = "\n... [earlier tool output elided] ..."

NEW_PATH_CRITERIA = "Satisfies the goal's success criteria"


@dataclass(frozen=True)
class AgentState:
    """Dialogue turns plus the node bookkeeping sets.

    The first turn is always the system prompt, and an assistant turn is
    always followed by a tool or user turn. ``step_index`` counts the
    tool-executing assistant turns recorded so far.
    """

    turns: tuple[DialogueTurn, ...]
    step_index: int = 0
    pending: frozenset[NodeId] = frozenset()
    completed: frozenset[NodeId] = frozenset()


@dataclass(frozen=True)
class EngineConfig:
    max_steps: int = 40
    summary_interval: int = 8  # steps between progress summaries (7-9 typical)
    policy: SchedulingPolicy = field(default_factory=SchedulingPolicy)
    per_call_timeout: float = 60.0
    max_concurrent_dispatch: int = 5
    context_char_budget: Optional[int] = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.summary_interval < 1:
            raise ValueError("summary_interval must be >= 1")
        if self.max_concurrent_dispatch < 1:
            raise ValueError("max_concurrent_dispatch must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_steps": self.max_steps,
            "summary_interval": self.summary_interval,
            "policy": self.policy.to_dict(),
            "per_call_timeout": self.per_call_timeout,
            "max_concurrent_dispatch": self.max_concurrent_dispatch,
            "context_char_budget": self.context_char_budget,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        return cls(
            max_steps=int(data.get("max_steps", 40)),
            summary_interval=int(data.get("summary_interval", 8)),
            policy=SchedulingPolicy.from_dict(data.get("policy", {})),
            per_call_timeout=float(data.get("per_call_timeout", 60.0)),
            max_concurrent_dispatch=int(data.get("max_concurrent_dispatch", 5)),
            context_char_budget=data.get("context_char_budget"),
        )


# ---------------------------------------------------------------------------
# Pure state transitions
# ---------------------------------------------------------------------------

def integrate(
    state: AgentState,
    envelope: ActionEnvelope,
    observations: Sequence[Observation],
) -> AgentState:
    """Fold one step into the dialogue: the assistant envelope turn plus
    a single tool turn holding all observations in submission order.

    Pure function of its inputs; node sets are untouched (the scheduler
    updates those separately). Replaying recorded (envelope,
    observations) pairs therefore reproduces the recorded state.
    """
    if len(observations) != len(envelope.tool_calls):
        raise CountMismatch(
            f"{len(observations)} observations for {len(envelope.tool_calls)} tool calls"
        )
    turns = state.turns + (
        DialogueTurn("assistant", serialize_envelope(envelope)),
        DialogueTurn("tool", render_observations(list(envelope.tool_calls), list(observations))),
    )
    return replace(state, turns=turns, step_index=state.step_index + 1)


def condensed_turns(
    turns: Sequence[DialogueTurn], char_budget: Optional[int]
) -> list[DialogueTurn]:
    """View of the dialogue under a character budget.

    Oldest tool turns are cut to their first 500 characters plus an
    elision marker until the rendered size fits; assistant turns
    (including summaries) and the system/task turns are never elided.
    The underlying state keeps the full text.
    """
    out = list(turns)
    if char_budget is None:
        return out
    total = sum(len(t.content) for t in out)
    for i, turn in enumerate(out):
        if total <= char_budget:
            break
        if turn.role != "tool" or len(turn.content) <= 500:
            continue
        clipped = turn.content[:500] + ELISION_MARKER
        total -= len(turn.content) - len(clipped)
        out[i] = DialogueTurn(turn.role, clipped)
    return out


def derive_outcomes(
    envelope: ActionEnvelope,
    observations: Sequence[Observation],
    frontier: Frontier,
) -> dict[NodeId, str]:
    """Pair call k with frontier node k and fail nodes whose call errored."""
    outcomes: dict[NodeId, str] = {}
    for k, (call, obs) in enumerate(zip(envelope.tool_calls, observations)):
        if k >= len(frontier.nodes):
            break
        if call.name == FINAL_ANSWER:
            continue
        if not obs.ok:
            outcomes[frontier.nodes[k]] = OUTCOME_FAILED
    return outcomes


def apply_step_statuses(
    graph: PlanGraph, frontier: Frontier, outcomes: dict[NodeId, str]
) -> PlanGraph:
    """Materialize dispatch and failure effects onto a graph copy."""
    out = graph.clone()
    for node in frontier.nodes:
        path = out.find_path(node)
        if path.status == PathStatus.PENDING:
            path.status = PathStatus.IN_PROGRESS
    for node, outcome in outcomes.items():
        path = out.find_path(node)
        if outcome == OUTCOME_FAILED and not path.status.terminal:
            path.status = PathStatus.FAILED
    for goal in out.goals:
        if goal.status in (GoalStatus.RESOLVED, GoalStatus.BLOCKED):
            continue
        if all(p.status == PathStatus.FAILED for p in goal.paths):
            goal.status = GoalStatus.BLOCKED
        elif any(p.status == PathStatus.IN_PROGRESS for p in goal.paths):
            goal.status = GoalStatus.IN_PROGRESS
    return out


# ---------------------------------------------------------------------------
# Progress summaries
# ---------------------------------------------------------------------------

STATUS_COMPLETED = "completed"
STATUS_IN_PROGRESS = "in progress"
STATUS_BLOCKED = "blocked"

_SECTION_RE = re.compile(r"^###\s*Goal\s+(\d+)\s*:?(.*)$", re.MULTILINE)
_STATUS_RE = re.compile(r"-\s*Status\s*:\s*\[?\s*(Completed|In Progress|Blocked)\s*\]?", re.IGNORECASE)
_RESOLVED_RE = re.compile(r"Goal\s+(\d+)\s*:\s*resolved,\s*result is\s*(.+)", re.IGNORECASE)
_UP_TO_RE = re.compile(r"completed up to path\s+(\d+)", re.IGNORECASE)
_NEXT_SECTION_RE = re.compile(r"^##\s*Next Parallel Sub-Paths\s*$(.*)", re.MULTILINE | re.DOTALL)
_NEXT_ITEM_RE = re.compile(r"^-\s*Goal\s+(\d+)\s*:\s*(.+)$", re.MULTILINE)


@dataclass
class GoalReport:
    goal_index: int
    status: Optional[str] = None  # completed | in progress | blocked
    result: Optional[str] = None
    completed_up_to: Optional[int] = None


@dataclass
class SummaryReport:
    goals: list[GoalReport] = field(default_factory=list)
    next_paths: dict[int, str] = field(default_factory=dict)


def parse_summary(text: str) -> SummaryReport:
    """Extract per-goal statuses and proposed next sub-paths from a
    progress summary. Raises :class:`SummaryParseError` when no goal
    status information can be found at all."""
    report = SummaryReport()
    sections = list(_SECTION_RE.finditer(text))
    for i, match in enumerate(sections):
        start = match.end()
        end = sections[i + 1].start() if i + 1 < len(sections) else len(text)
        body = text[start:end]
        goal_report = GoalReport(goal_index=int(match.group(1)))
        status = _STATUS_RE.search(body)
        if status:
            goal_report.status = status.group(1).lower()
        up_to = _UP_TO_RE.search(body)
        if up_to:
            goal_report.completed_up_to = int(up_to.group(1))
        resolved = _RESOLVED_RE.search(body)
        if resolved:
            goal_report.status = STATUS_COMPLETED
            goal_report.result = resolved.group(2).strip()
        report.goals.append(goal_report)

    # Resolved-pattern lines can also appear outside any section.
    for match in _RESOLVED_RE.finditer(text):
        idx = int(match.group(1))
        if not any(g.goal_index == idx for g in report.goals):
            report.goals.append(
                GoalReport(goal_index=idx, status=STATUS_COMPLETED, result=match.group(2).strip())
            )

    next_section = _NEXT_SECTION_RE.search(text)
    if next_section:
        for item in _NEXT_ITEM_RE.finditer(next_section.group(1)):
            report.next_paths.setdefault(int(item.group(1)), item.group(2).strip())

    if not report.goals and not report.next_paths:
        raise SummaryParseError("no goal status sections found in summary")
    return report


def apply_summary(
    graph: PlanGraph,
    report: SummaryReport,
    pending: frozenset[NodeId],
    completed: frozenset[NodeId],
) -> tuple[PlanGraph, frozenset[NodeId], frozenset[NodeId]]:
    """Fold a parsed summary into a new graph version and node sets.

    Status changes respect the lattice: terminal paths and resolved
    goals are never revived; a blocked goal only re-enters pending when
    the summary appends a fresh sub-path for it. Proposed sub-paths
    beyond the 5-path bound are dropped.
    """
    out = graph.clone()
    new_pending = set(pending)
    new_completed = set(completed)

    def fail_path(goal: Goal, path: Path):
        if path.status.terminal:
            return
        path.status = PathStatus.FAILED
        new_pending.discard(path.id)

    for goal_report in report.goals:
        try:
            goal = out.goal(goal_report.goal_index)
        except KeyError:
            continue  # summary invented a goal; ignore it
        if goal.status == GoalStatus.RESOLVED:
            continue

        if goal_report.status == STATUS_COMPLETED:
            goal.status = GoalStatus.RESOLVED
            goal.result_summary = goal_report.result or "reported completed by progress summary"
            current = next((p for p in goal.paths if p.id in new_pending), None)
            if current is not None:
                current.status = PathStatus.SUCCEEDED
                new_completed.add(current.id)
            new_completed.add(goal.id)
            new_pending.discard(goal.id)
            for p in goal.paths:
                new_pending.discard(p.id)
            continue

        if goal_report.completed_up_to is not None:
            for p in goal.paths:
                if p.id.path_index <= goal_report.completed_up_to and p.id in new_pending:
                    fail_path(goal, p)

        if goal_report.status == STATUS_BLOCKED:
            current = next((p for p in goal.paths if p.id in new_pending), None)
            if current is not None:
                fail_path(goal, current)

        if not any(p.id in new_pending for p in goal.paths):
            goal.status = GoalStatus.BLOCKED
            new_pending.discard(goal.id)

    for goal_index, approach in sorted(report.next_paths.items()):
        try:
            goal = out.goal(goal_index)
        except KeyError:
            continue
        if goal.status == GoalStatus.RESOLVED or goal.id in new_completed:
            continue
        if len(goal.paths) >= MAX_PATHS_PER_GOAL:
            continue  # keep the 5-path bound; lowest-priority additions drop
        node = NodeId(goal_index, len(goal.paths) + 1)
        goal.paths.append(Path(id=node, approach=approach, success_criteria=NEW_PATH_CRITERIA))
        new_pending.add(node)
        if goal.id not in new_pending:  # revive a blocked goal
            goal.status = GoalStatus.PENDING
            new_pending.add(goal.id)

    return out.bump_version(), frozenset(new_pending), frozenset(new_completed)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

def select_actions(
    state: AgentState,
    task: str,
    tool_schema_text: str,
    backend: ModelBackend,
    policy: SchedulingPolicy,
    context_char_budget: Optional[int] = None,
) -> ActionEnvelope:
    """Ask the backend for this step's envelope via the execution prompt.

    The execution prompt rides along as an ephemeral user turn; it is
    not persisted into the dialogue state. One retry with a format
    reminder is attempted before the parse error propagates.
    """
    instruction = render_prompt(
        load_template("execution"),
        {"task": task, "tools": tool_schema_text, "max_tool_calls": str(policy.max_tool_calls_per_step)},
    )
    request = condensed_turns(state.turns, context_char_budget) + [DialogueTurn("user", instruction)]
    reply = backend.generate(request, PURPOSE_ACT)
    try:
        return parse_envelope(reply, max_calls=policy.max_tool_calls_per_step)
    except EnvelopeParseError as first_error:
        logger.debug("envelope parse failed, retrying once: %s", first_error)
        retry_request = request + [
            DialogueTurn("assistant", reply),
            DialogueTurn("user", FORMAT_REMINDER),
        ]
        reply = backend.generate(retry_request, PURPOSE_ACT)
        return parse_envelope(reply, max_calls=policy.max_tool_calls_per_step)


def refine(
    graph: PlanGraph,
    state: AgentState,
    backend: ModelBackend,
    context_char_budget: Optional[int] = None,
) -> tuple[PlanGraph, AgentState, str, Optional[str]]:
    """Run one plan refinement from a model-written progress summary.

    Returns (graph, state, summary_text, error). On a parse failure the
    graph comes back unchanged and ``error`` carries the reason; the
    summary text is still appended to the dialogue either way.
    """
    request = (
        [DialogueTurn("system", load_template("summary_system").body)]
        + condensed_turns(state.turns[1:], context_char_budget)
        + [DialogueTurn("user", load_template("summary_instruction").body)]
    )
    summary_text = backend.generate(request, PURPOSE_SUMMARIZE).strip()
    error: Optional[str] = None
    try:
        report = parse_summary(summary_text)
        graph, pending, completed = apply_summary(graph, report, state.pending, state.completed)
        state = replace(state, pending=pending, completed=completed)
    except SummaryParseError as exc:
        error = str(exc)
    state = replace(
        state,
        turns=state.turns
        + (DialogueTurn("assistant", summary_text), DialogueTurn("user", CONTINUE_PROMPT)),
    )
    return graph, state, summary_text, error


class Engine:
    """Runs one task end to end against a backend and a tool registry.

    Engines hold no cross-run state; multiple instances may run in
    parallel. ``clock`` exists so deterministic runs can pin durations
    (pass ``lambda: 0.0``).
    """

    def __init__(
        self,
        config: EngineConfig,
        backend: ModelBackend,
        tools: ToolRegistry,
        clock: Optional[Callable[[], float]] = None,
    ):
        self.config = config
        self.backend = backend
        self.tools = tools
        self.clock = clock or time.monotonic
        self.final_state: Optional[AgentState] = None
        self.final_graph: Optional[PlanGraph] = None

    # -- helpers -----------------------------------------------------------

    def _make_plan(self, task: str, tool_schema_text: str) -> PlanGraph:
        prompt = render_prompt(load_template("dag_plan"), {"task": task, "tools": tool_schema_text})
        request = [DialogueTurn("user", prompt)]
        reply = self.backend.generate(request, PURPOSE_PLAN)
        try:
            return parse_plan(reply)
        except MalformedPlan as first_error:
            logger.debug("plan parse failed, retrying once: %s", first_error)
            retry = request + [DialogueTurn("assistant", reply), DialogueTurn("user", PLAN_REMINDER)]
            reply = self.backend.generate(retry, PURPOSE_PLAN)
            return parse_plan(reply)

    def _dispatch(self, calls, executor: Optional[ThreadPoolExecutor]) -> list[Observation]:
        if len(calls) == 1 or executor is None:
            return [self.tools.execute(call, i, self.clock) for i, call in enumerate(calls)]
        futures = [
            executor.submit(self.tools.execute, call, i, self.clock)
            for i, call in enumerate(calls)
        ]
        observations: list[Observation] = []
        for i, future in enumerate(futures):
            try:
                observations.append(future.result(timeout=self.config.per_call_timeout))
            except FutureTimeout:
                observations.append(
                    Observation(
                        i,
                        f"tool call timed out after {self.config.per_call_timeout}s",
                        "error",
                        self.config.per_call_timeout,
                    )
                )
        return observations

    # -- main loop ----------------------------------------------------------

    def run(self, task: str, task_id: str = "task", gold_answer: Optional[str] = None) -> TrajectoryRecord:
        config = self.config
        started = self.clock()
        tool_schema_text = render_tool_schemas(self.tools.specs())
        system_prompt = render_prompt(load_template("system"), {"tools": tool_schema_text})

        graph = self._make_plan(task, tool_schema_text)
        plan_text = serialize_plan(graph)
        state = AgentState(
            turns=(
                DialogueTurn("system", system_prompt),
                DialogueTurn("user", task_wrapper(task)),
                DialogueTurn("assistant", plan_text),
                DialogueTurn("user", CONTINUE_PROMPT),
            ),
            step_index=0,
            pending=frozenset(graph.node_ids()),
            completed=frozenset(),
        )

        plan_versions = [plan_text]
        records: list[StepRecord] = [
            StepRecord(0, ActionEnvelope(PHASE_PLAN, plan_text), (), Frontier(), 0.0)
        ]
        events: list[dict] = []
        termination = TERM_BUDGET_EXHAUSTED
        final_answer: Optional[str] = None

        executor: Optional[ThreadPoolExecutor] = None
        if config.max_concurrent_dispatch > 1:
            executor = ThreadPoolExecutor(
                max_workers=config.max_concurrent_dispatch,
                thread_name_prefix=f"dagent-{task_id}",
            )
        try:
            while True:
                t = state.step_index + 1
                frontier = ready_set(graph, state.pending, state.completed, config.policy)
                step_started = self.clock()
                envelope = select_actions(
                    state, task, tool_schema_text, self.backend, config.policy, config.context_char_budget
                )
                observations = self._dispatch(list(envelope.tool_calls), executor)
                state = integrate(state, envelope, observations)
                outcomes = derive_outcomes(envelope, observations, frontier)
                pending, completed = mark_complete(graph, state.pending, state.completed, outcomes)
                graph = apply_step_statuses(graph, frontier, outcomes)
                state = replace(state, pending=pending, completed=completed)
                records.append(
                    StepRecord(t, envelope, tuple(observations), frontier, self.clock() - step_started)
                )

                answer_call = envelope.final_answer_call
                if answer_call is not None:
                    idx = envelope.tool_calls.index(answer_call)
                    if observations[idx].ok:
                        final_answer = observations[idx].content
                        termination = TERM_FINAL_ANSWER
                        break
                if not state.pending:
                    termination = TERM_PLAN_COMPLETE
                    break
                if t >= config.max_steps:
                    termination = TERM_BUDGET_EXHAUSTED
                    break

                if t % config.summary_interval == 0:
                    summary_started = self.clock()
                    graph, state, summary_text, error = refine(
                        graph, state, self.backend, config.context_char_budget
                    )
                    records.append(
                        StepRecord(
                            t,
                            ActionEnvelope(PHASE_SUMMARY, summary_text),
                            (),
                            Frontier(),
                            self.clock() - summary_started,
                        )
                    )
                    if error is None:
                        plan_versions.append(serialize_plan(graph))
                    else:
                        events.append({"step": t, "error": f"SummaryParseError: {error}"})
                    if not state.pending:
                        termination = TERM_PLAN_COMPLETE
                        break
        finally:
            if executor is not None:
                executor.shutdown(wait=False)

        self.final_state = state
        self.final_graph = graph
        return TrajectoryRecord(
            task_id=task_id,
            task_text=task,
            gold_answer=gold_answer,
            config=config.to_dict(),
            metadata={"plan_step_in_budget": False, "events": events},
            plan_versions=tuple(plan_versions),
            steps=tuple(records),
            termination=termination,
            final_answer=final_answer,
            wall_time=self.clock() - started,
        )


def run(
    task: str,
    config: EngineConfig,
    backend: ModelBackend,
    tools: ToolRegistry,
    task_id: str = "task",
    gold_answer: Optional[str] = None,
    clock: Optional[Callable[[], float]] = None,
) -> TrajectoryRecord:
    """Convenience wrapper: one engine, one task, one trajectory."""
    return Engine(config, backend, tools, clock=clock).run(task, task_id=task_id, gold_answer=gold_answer)

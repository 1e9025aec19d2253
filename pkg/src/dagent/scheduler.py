"""Readiness predicate and per-step frontier selection.

The scheduler decides which plan nodes may execute this step. Strict mode
admits a path only when every explicit prerequisite is already completed.
Aggressive mode additionally admits a path whose unmet prerequisites are
all being executed in this same step (the weakest relaxation that still
refuses to schedule past a failed dependency). Within a goal only the
lowest-indexed non-terminal path is ever eligible, and a frontier carries
at most one node per goal.

Terminality is encoded in the two sets the engine maintains: a path that
left ``pending`` without entering ``completed`` failed; a goal that left
``pending`` without entering ``completed`` is blocked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Mapping

from .errors import UnknownNode
from .plan import MAX_GOALS, NodeId, PlanGraph

MODE_STRICT = "strict"
MODE_AGGRESSIVE = "aggressive"


@dataclass(frozen=True)
class SchedulingPolicy:
    """Knobs bounding each step's frontier and tool budget."""

    mode: str = MODE_STRICT
    max_parallel_goals: int = 5
    max_tool_calls_per_step: int = 5

    def __post_init__(self):
        if self.mode not in (MODE_STRICT, MODE_AGGRESSIVE):
            raise ValueError(f"unknown scheduling mode {self.mode!r}")
        if not 1 <= self.max_parallel_goals <= MAX_GOALS:
            raise ValueError("max_parallel_goals must be in 1..5")
        if self.max_tool_calls_per_step < 1:
            raise ValueError("max_tool_calls_per_step must be >= 1")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "max_parallel_goals": self.max_parallel_goals,
            "max_tool_calls_per_step": self.max_tool_calls_per_step,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SchedulingPolicy":
        return cls(
            mode=data.get("mode", MODE_STRICT),
            max_parallel_goals=int(data.get("max_parallel_goals", 5)),
            max_tool_calls_per_step=int(data.get("max_tool_calls_per_step", 5)),
        )


@dataclass(frozen=True)
class Frontier:
    """Nodes selected for one step, ordered by (goal index, path index)."""

    nodes: tuple[NodeId, ...] = ()

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _check_known(graph: PlanGraph, ids: AbstractSet[NodeId]) -> None:
    known = set(graph.node_ids())
    for node in ids:
        if node not in known:
            raise UnknownNode(str(node))


def _deps(graph: PlanGraph, node: NodeId) -> set[NodeId]:
    # A path inherits its goal's prerequisites on top of its own.
    deps = graph.predecessors(node)
    if not node.is_goal:
        deps |= graph.predecessors(node.goal_node())
    return deps


def eligible_nodes(
    graph: PlanGraph,
    pending: AbstractSet[NodeId],
    completed: AbstractSet[NodeId],
    mode: str = MODE_STRICT,
) -> list[NodeId]:
    """Full ordered eligibility set before the width cap is applied.

    A path node is eligible when its goal is still pending, it is the
    goal's lowest-indexed pending path, and its prerequisites are
    satisfied per ``mode``. In aggressive mode satisfaction is computed
    as a fixed point: a prerequisite also counts when it (for a goal,
    any of its paths) is itself joining this frontier.
    """
    candidates: list[NodeId] = []
    for goal in graph.goals:
        if goal.id not in pending:
            continue
        current = next((p.id for p in goal.paths if p.id in pending), None)
        if current is not None:
            candidates.append(current)

    chosen: list[NodeId] = []
    chosen_goals: set[int] = set()

    def satisfied(dep: NodeId) -> bool:
        if dep in completed:
            return True
        if mode != MODE_AGGRESSIVE:
            return False
        if dep.is_goal:
            return dep.goal_index in chosen_goals
        return dep in chosen

    changed = True
    while changed:
        changed = False
        for node in candidates:
            if node in chosen:
                continue
            if all(satisfied(d) for d in _deps(graph, node)):
                chosen.append(node)
                chosen_goals.add(node.goal_index)
                changed = True
        if mode != MODE_AGGRESSIVE:
            break  # strict has no closure to iterate

    chosen.sort()
    return chosen


def ready_set(
    graph: PlanGraph,
    pending: AbstractSet[NodeId],
    completed: AbstractSet[NodeId],
    policy: SchedulingPolicy,
) -> Frontier:
    """Select this step's frontier.

    Requires ``pending`` and ``completed`` to be disjoint and all ids to
    exist in the graph. Output is ordered by (goal index, path index) and
    truncated to ``policy.max_parallel_goals``, lowest goal index first.
    """
    overlap = set(pending) & set(completed)
    if overlap:
        raise ValueError(f"pending and completed overlap: {sorted(map(str, overlap))}")
    _check_known(graph, set(pending) | set(completed))
    nodes = eligible_nodes(graph, pending, completed, policy.mode)
    return Frontier(tuple(nodes[: policy.max_parallel_goals]))


OUTCOME_SUCCEEDED = "succeeded"
OUTCOME_FAILED = "failed"


def mark_complete(
    graph: PlanGraph,
    pending: AbstractSet[NodeId],
    completed: AbstractSet[NodeId],
    outcomes: Mapping[NodeId, str],
) -> tuple[frozenset[NodeId], frozenset[NodeId]]:
    """Fold per-path outcomes into new (pending, completed) sets.

    A succeeded path completes itself and its goal; the goal's remaining
    paths become moot and leave pending. A failed path just becomes
    terminal, exposing the goal's next fallback path; when the last path
    fails the goal is blocked and leaves pending (revivable only by
    refinement). Every outcome node must be a currently-pending path.
    """
    new_pending = set(pending)
    new_completed = set(completed)
    known = set(graph.node_ids())

    for node in sorted(outcomes):
        outcome = outcomes[node]
        if node not in known:
            raise UnknownNode(str(node))
        if node.is_goal or node not in new_pending:
            raise ValueError(f"outcome for non-pending or non-path node {node}")
        if outcome not in (OUTCOME_SUCCEEDED, OUTCOME_FAILED):
            raise ValueError(f"unknown outcome {outcome!r} for {node}")

        goal = graph.goal(node.goal_index)
        if outcome == OUTCOME_SUCCEEDED:
            new_completed.add(node)
            new_completed.add(goal.id)
            new_pending.discard(node)
            new_pending.discard(goal.id)
            for p in goal.paths:
                new_pending.discard(p.id)
        else:
            new_pending.discard(node)
            if not any(p.id in new_pending for p in goal.paths):
                new_pending.discard(goal.id)  # blocked

    return frozenset(new_pending), frozenset(new_completed)

"""DAG plan data model plus the planner-output parser and serializer.

A plan is 1-5 goals, each holding 1-5 ordered paths. Goals advance in
parallel; paths inside a goal are sequential fallbacks. Cross-goal
prerequisite edges may be attached programmatically (the parser emits
none); consecutive paths within a goal form implicit edges for cycle
checking.

The accepted text grammar is the one the planner prompt demands::

    ## Goal 1: [Goal Name]
    - Path 1.1: [Approach name]
    - Success: [Completion criteria]

Extra blank lines, leading preamble, indentation, nested "- Approach:"
bullets and trailing prose are tolerated; count violations and numbering
mismatches are not.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

from .errors import MalformedPlan

MAX_GOALS = 5
MAX_PATHS_PER_GOAL = 5


@dataclass(frozen=True)
class NodeId:
    """Identifies a goal (``g2``) or a path within a goal (``g2.p1``).

    Indices are 1-based; ``path_index`` is absent for goal-level nodes.
    Ordering is (goal index, path index), goal nodes first.
    """

    goal_index: int
    path_index: Optional[int] = None

    def __post_init__(self):
        if self.goal_index < 1:
            raise ValueError("goal_index is 1-based")
        if self.path_index is not None and self.path_index < 1:
            raise ValueError("path_index is 1-based")

    def sort_key(self) -> tuple[int, int]:
        return (self.goal_index, self.path_index or 0)

    def __lt__(self, other: "NodeId") -> bool:
        return self.sort_key() < other.sort_key()

    @property
    def is_goal(self) -> bool:
        return self.path_index is None

    def goal_node(self) -> "NodeId":
        return NodeId(self.goal_index)

    def __str__(self) -> str:
        if self.path_index is None:
            return f"g{self.goal_index}"
        return f"g{self.goal_index}.p{self.path_index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        m = re.fullmatch(r"g(\d+)(?:\.p(\d+))?", text.strip())
        if not m:
            raise ValueError(f"not a node id: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)) if m.group(2) else None)


class PathStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    SUCCEEDED = "succeeded"
    FAILED = "failed"

    @property
    def terminal(self) -> bool:
        return self in (PathStatus.SUCCEEDED, PathStatus.FAILED)


class GoalStatus(str, Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    RESOLVED = "resolved"
    BLOCKED = "blocked"


@dataclass
class Path:
    """One approach to a goal, with the criteria that would close it out."""

    id: NodeId
    approach: str
    success_criteria: str
    status: PathStatus = PathStatus.PENDING


@dataclass
class Goal:
    """A top-level objective; its paths are tried in order as fallbacks."""

    id: NodeId
    title: str
    paths: list[Path] = field(default_factory=list)
    status: GoalStatus = GoalStatus.PENDING
    result_summary: Optional[str] = None


@dataclass
class PlanGraph:
    """The full decomposition: ordered goals plus prerequisite edges.

    Treated as immutable once handed to the engine: updates go through
    copies produced by :meth:`clone`, with ``version`` bumped once per
    refinement.
    """

    goals: list[Goal] = field(default_factory=list)
    edges: set[tuple[NodeId, NodeId]] = field(default_factory=set)
    version: int = 0

    # -- lookups ---------------------------------------------------------

    def goal(self, goal_index: int) -> Goal:
        for g in self.goals:
            if g.id.goal_index == goal_index:
                return g
        raise KeyError(goal_index)

    def node_ids(self) -> list[NodeId]:
        """All goal and path node ids in document order."""
        out: list[NodeId] = []
        for g in self.goals:
            out.append(g.id)
            out.extend(p.id for p in g.paths)
        return out

    def path_node_ids(self) -> list[NodeId]:
        return [p.id for g in self.goals for p in g.paths]

    def contains(self, node: NodeId) -> bool:
        for g in self.goals:
            if g.id == node:
                return True
            if any(p.id == node for p in g.paths):
                return True
        return False

    def find_path(self, node: NodeId) -> Path:
        goal = self.goal(node.goal_index)
        for p in goal.paths:
            if p.id == node:
                return p
        raise KeyError(node)

    def predecessors(self, node: NodeId) -> set[NodeId]:
        """Explicit prerequisite nodes of ``node`` (edges pointing into it)."""
        return {src for src, dst in self.edges if dst == node}

    def clone(self) -> "PlanGraph":
        return copy.deepcopy(self)

    def bump_version(self) -> "PlanGraph":
        return replace(self, version=self.version + 1)

    def check_consistent(self) -> None:
        """Raise if node ids are duplicated, counts are out of bounds, or
        an edge references a node that does not exist."""
        if not 1 <= len(self.goals) <= MAX_GOALS:
            raise MalformedPlan(f"plan must hold 1-{MAX_GOALS} goals, found {len(self.goals)}")
        seen: set[NodeId] = set()
        for g in self.goals:
            if not 1 <= len(g.paths) <= MAX_PATHS_PER_GOAL:
                raise MalformedPlan(
                    f"goal {g.id} must hold 1-{MAX_PATHS_PER_GOAL} paths, found {len(g.paths)}"
                )
            for node in [g.id] + [p.id for p in g.paths]:
                if node in seen:
                    raise MalformedPlan(f"duplicate node id {node}")
                seen.add(node)
        for src, dst in self.edges:
            for endpoint in (src, dst):
                if endpoint not in seen:
                    raise MalformedPlan(f"edge endpoint {endpoint} not in graph")


@dataclass(frozen=True)
class CycleReport:
    """Names one offending cycle as the node sequence that closes it."""

    nodes: tuple[NodeId, ...]

    def __str__(self) -> str:
        return " -> ".join(str(n) for n in self.nodes)


_GOAL_RE = re.compile(r"^##\s*Goal\s+(\d+)\s*:\s*(.*)$")
_PATH_RE = re.compile(r"^[-*]\s*Path\s+(\d+)\.(\d+)\s*:\s*(.*)$")
_SUCCESS_RE = re.compile(r"^[-*]\s*Success\s*:\s*(.*)$")
_APPROACH_RE = re.compile(r"^[-*]\s*Approach\s*:\s*(.*)$")


def _squash(text: str) -> str:
    return " ".join(text.split())


def parse_plan(text: str) -> PlanGraph:
    """Parse planner output into a :class:`PlanGraph`.

    All statuses come back pending and ``version`` is 0. No cross-goal
    edges are emitted; the planner contract declares goals independent
    and dependencies only appear later through refinement.

    Raises :class:`MalformedPlan` on: no goal headings, more than 5
    goals, a goal with 0 or more than 5 paths, a path with no success
    line, or goal/path numbering that does not run 1..n in order.
    """
    goals: list[Goal] = []
    current_goal: Optional[Goal] = None
    current_path: Optional[Path] = None
    # Tracks whether free text should extend the approach or the success
    # criteria of the path being built.
    in_success = False

    def close_path():
        nonlocal current_path, in_success
        if current_path is not None:
            if not current_path.success_criteria:
                raise MalformedPlan(f"path {current_path.id} is missing a Success line")
            current_goal.paths.append(current_path)
        current_path = None
        in_success = False

    def close_goal():
        nonlocal current_goal
        close_path()
        if current_goal is not None:
            if not current_goal.paths:
                raise MalformedPlan(f"goal {current_goal.id} has no paths")
            if len(current_goal.paths) > MAX_PATHS_PER_GOAL:
                raise MalformedPlan(
                    f"goal {current_goal.id} has {len(current_goal.paths)} paths; limit is {MAX_PATHS_PER_GOAL}"
                )
            goals.append(current_goal)
        current_goal = None

    for raw_line in text.splitlines():
        line = raw_line.strip()
        if not line:
            continue

        m = _GOAL_RE.match(line)
        if m:
            close_goal()
            number = int(m.group(1))
            if number != len(goals) + 1:
                raise MalformedPlan(f"goal headings must be numbered in order; saw Goal {number}")
            if number > MAX_GOALS:
                raise MalformedPlan(f"plan exceeds {MAX_GOALS} goals")
            current_goal = Goal(id=NodeId(number), title=_squash(m.group(2)))
            continue

        if current_goal is None:
            continue  # preamble before the first heading

        m = _PATH_RE.match(line)
        if m:
            close_path()
            goal_no, path_no = int(m.group(1)), int(m.group(2))
            if goal_no != current_goal.id.goal_index:
                raise MalformedPlan(
                    f"path {goal_no}.{path_no} listed under goal {current_goal.id.goal_index}"
                )
            if path_no != len(current_goal.paths) + 1:
                raise MalformedPlan(f"paths must be numbered in order; saw Path {goal_no}.{path_no}")
            current_path = Path(
                id=NodeId(goal_no, path_no), approach=_squash(m.group(3)), success_criteria=""
            )
            continue

        m = _SUCCESS_RE.match(line)
        if m:
            if current_path is None:
                raise MalformedPlan("Success line outside of any path")
            current_path.success_criteria = _squash(m.group(1))
            in_success = True
            continue

        if current_path is not None:
            m = _APPROACH_RE.match(line)
            extra = _squash(m.group(1)) if m else _squash(line)
            if m:
                in_success = False
            if in_success:
                current_path.success_criteria = _squash(
                    current_path.success_criteria + " " + extra
                )
            else:
                current_path.approach = _squash(current_path.approach + " " + extra)
        # Prose between a goal heading and its first path is ignored.

    close_goal()
    if not goals:
        raise MalformedPlan("no '## Goal' headings found")
    graph = PlanGraph(goals=goals)
    graph.check_consistent()
    return graph


def serialize_plan(graph: PlanGraph) -> str:
    """Render a graph back to plan text.

    Structure round-trips: re-parsing yields the same titles, approaches,
    success criteria and counts. Statuses, edges and the version counter
    are deliberately not emitted.
    """
    lines: list[str] = []
    for goal in graph.goals:
        lines.append(f"## Goal {goal.id.goal_index}: {goal.title}")
        for path in goal.paths:
            lines.append(f"- Path {path.id.goal_index}.{path.id.path_index}: {path.approach}")
            lines.append(f"- Success: {path.success_criteria}")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def implicit_edges(graph: PlanGraph) -> set[tuple[NodeId, NodeId]]:
    """Within-goal sequencing edges: path i precedes path i+1."""
    edges: set[tuple[NodeId, NodeId]] = set()
    for goal in graph.goals:
        for prev, nxt in zip(goal.paths, goal.paths[1:]):
            edges.add((prev.id, nxt.id))
    return edges


def validate_dag(graph: PlanGraph) -> Optional[CycleReport]:
    """Return ``None`` when the edge set plus the implicit within-goal
    chains is acyclic, else a :class:`CycleReport` naming one cycle."""
    adjacency: dict[NodeId, list[NodeId]] = {}
    nodes: set[NodeId] = set(graph.node_ids())
    for src, dst in set(graph.edges) | implicit_edges(graph):
        nodes.update((src, dst))  # unknown endpoints still participate
        adjacency.setdefault(src, []).append(dst)
    for k in adjacency:
        adjacency[k].sort()

    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    stack_path: list[NodeId] = []

    def visit(start: NodeId) -> Optional[CycleReport]:
        # Iterative DFS keeping the grey path for cycle extraction.
        work: list[tuple[NodeId, Iterable[NodeId]]] = [(start, iter(adjacency.get(start, ())))]
        color[start] = GREY
        stack_path.append(start)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GREY:
                    i = stack_path.index(nxt)
                    return CycleReport(tuple(stack_path[i:] + [nxt]))
                if color[nxt] == WHITE:
                    color[nxt] = GREY
                    stack_path.append(nxt)
                    work.append((nxt, iter(adjacency.get(nxt, ()))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack_path.pop()
                work.pop()
        return None

    for node in sorted(nodes):
        if color[node] == WHITE:
            report = visit(node)
            if report is not None:
                return report
    return None

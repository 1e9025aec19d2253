"""Frontier selection against brute-force oracles, plus completion rules."""

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dagent.errors import UnknownNode
from dagent.plan import Goal, NodeId, Path, PlanGraph
from dagent.scheduler import (
    Frontier,
    OUTCOME_FAILED,
    OUTCOME_SUCCEEDED,
    SchedulingPolicy,
    eligible_nodes,
    mark_complete,
    ready_set,
)


def single_path_graph(n_goals: int, goal_edges=()) -> PlanGraph:
    goals = [
        Goal(NodeId(g), f"G{g}", [Path(NodeId(g, 1), "a", "s")]) for g in range(1, n_goals + 1)
    ]
    return PlanGraph(goals=goals, edges={(NodeId(a), NodeId(b)) for a, b in goal_edges})


def multi_path_graph(path_counts: list[int], goal_edges=()) -> PlanGraph:
    goals = [
        Goal(NodeId(g), f"G{g}", [Path(NodeId(g, p), "a", "s") for p in range(1, n + 1)])
        for g, n in enumerate(path_counts, start=1)
    ]
    return PlanGraph(goals=goals, edges={(NodeId(a), NodeId(b)) for a, b in goal_edges})


def full_pending(graph: PlanGraph) -> frozenset:
    return frozenset(graph.node_ids())


STRICT = SchedulingPolicy()
SEQUENTIAL = SchedulingPolicy(max_parallel_goals=1)
AGGRESSIVE = SchedulingPolicy(mode="aggressive")


class TestReadySet:
    def test_single_goal_no_prerequisites(self):
        graph = single_path_graph(1)
        frontier = ready_set(graph, full_pending(graph), frozenset(), STRICT)
        assert list(frontier) == [NodeId(1, 1)]

    def test_five_independent_goals_full_width(self):
        graph = single_path_graph(5)
        frontier = ready_set(graph, full_pending(graph), frozenset(), STRICT)
        assert list(frontier) == [NodeId(g, 1) for g in range(1, 6)]
        assert len({n.goal_index for n in frontier}) == 5

    def test_truncation_lowest_goal_first(self):
        graph = single_path_graph(5)
        frontier = ready_set(graph, full_pending(graph), frozenset(), SchedulingPolicy(max_parallel_goals=3))
        assert list(frontier) == [NodeId(1, 1), NodeId(2, 1), NodeId(3, 1)]

    def test_strict_blocks_on_unmet_dep(self):
        graph = single_path_graph(2, goal_edges=[(1, 2)])
        frontier = ready_set(graph, full_pending(graph), frozenset(), STRICT)
        assert list(frontier) == [NodeId(1, 1)]

    def test_strict_admits_after_dep_completed(self):
        graph = single_path_graph(2, goal_edges=[(1, 2)])
        pending = frozenset({NodeId(2), NodeId(2, 1)})
        completed = frozenset({NodeId(1), NodeId(1, 1)})
        frontier = ready_set(graph, pending, completed, STRICT)
        assert list(frontier) == [NodeId(2, 1)]

    def test_aggressive_schedules_alongside_in_progress_dep(self):
        graph = single_path_graph(2, goal_edges=[(1, 2)])
        pending = full_pending(graph)
        assert list(ready_set(graph, pending, frozenset(), STRICT)) == [NodeId(1, 1)]
        assert list(ready_set(graph, pending, frozenset(), AGGRESSIVE)) == [
            NodeId(1, 1),
            NodeId(2, 1),
        ]

    def test_aggressive_never_schedules_past_failed_dep(self):
        # Goal 1 is blocked (left pending without completing): its path
        # is not in this frontier, so goal 2 must not be admitted.
        graph = single_path_graph(2, goal_edges=[(1, 2)])
        pending = frozenset({NodeId(2), NodeId(2, 1)})
        assert list(ready_set(graph, pending, frozenset(), AGGRESSIVE)) == []

    def test_sequential_paths_rule(self):
        graph = multi_path_graph([3])
        pending = full_pending(graph)
        assert list(ready_set(graph, pending, frozenset(), STRICT)) == [NodeId(1, 1)]
        # After path 1 fails (leaves pending uncompleted), path 2 is next.
        pending = frozenset({NodeId(1), NodeId(1, 2), NodeId(1, 3)})
        assert list(ready_set(graph, pending, frozenset(), STRICT)) == [NodeId(1, 2)]

    def test_unknown_node_rejected(self):
        graph = single_path_graph(1)
        with pytest.raises(UnknownNode):
            ready_set(graph, frozenset({NodeId(9)}), frozenset(), STRICT)

    def test_overlapping_sets_rejected(self):
        graph = single_path_graph(1)
        with pytest.raises(ValueError):
            ready_set(graph, frozenset({NodeId(1)}), frozenset({NodeId(1)}), STRICT)


def brute_force_frontier(graph: PlanGraph, pending, completed) -> set:
    """Direct comprehension over single-path goals: the goal's path is
    ready iff the goal is still pending and deps(goal) are completed."""
    out = set()
    for goal in graph.goals:
        if goal.id not in pending:
            continue
        deps = {src for src, dst in graph.edges if dst == goal.id}
        if deps <= set(completed):
            out.add(goal.paths[0].id)
    return out


def random_completed_split(rng, n_goals):
    done = {g for g in range(1, n_goals + 1) if rng.random() < 0.5}
    completed = frozenset(
        {NodeId(g) for g in done} | {NodeId(g, 1) for g in done}
    )
    pending = frozenset(
        {NodeId(g) for g in range(1, n_goals + 1) if g not in done}
        | {NodeId(g, 1) for g in range(1, n_goals + 1) if g not in done}
    )
    return pending, completed


class TestOracleEquivalence:
    def test_exhaustive_small_dags(self):
        # Every DAG on up to 4 goals (edges follow the index order, which
        # covers all DAGs up to relabeling) x every completed subset.
        for n in range(1, 5):
            pairs = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1)]
            for mask in range(1 << len(pairs)):
                edges = [pairs[i] for i in range(len(pairs)) if mask >> i & 1]
                graph = single_path_graph(n, edges)
                for done_mask in range(1 << n):
                    done = {g + 1 for g in range(n) if done_mask >> g & 1}
                    completed = frozenset(
                        {NodeId(g) for g in done} | {NodeId(g, 1) for g in done}
                    )
                    pending = frozenset(set(graph.node_ids()) - set(completed))
                    got = set(eligible_nodes(graph, pending, completed, "strict"))
                    assert got == brute_force_frontier(graph, pending, completed)

    def test_random_wider_dags(self):
        rng = random.Random(99)
        for _ in range(2000):
            n = rng.randint(5, 8)
            edges = [
                (a, b)
                for a in range(1, n + 1)
                for b in range(a + 1, n + 1)
                if rng.random() < 0.3
            ]
            graph = single_path_graph(n, edges)
            pending, completed = random_completed_split(rng, n)
            got = set(eligible_nodes(graph, pending, completed, "strict"))
            assert got == brute_force_frontier(graph, pending, completed)


class TestFrontierInvariants:
    @settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_width_and_uniqueness(self, data):
        n = data.draw(st.integers(1, 5), label="goals")
        path_counts = data.draw(st.lists(st.integers(1, 5), min_size=n, max_size=n))
        graph = multi_path_graph(path_counts)
        width = data.draw(st.integers(1, 5), label="width")
        # Random terminal prefix per goal; goal leaves pending when all
        # paths are terminal or it completed.
        pending = set()
        completed = set()
        for goal in graph.goals:
            terminal_prefix = data.draw(st.integers(0, len(goal.paths)))
            succeeded = terminal_prefix > 0 and data.draw(st.booleans())
            if succeeded:
                completed |= {goal.id, goal.paths[terminal_prefix - 1].id}
            else:
                pending_paths = [p.id for p in goal.paths[terminal_prefix:]]
                pending |= set(pending_paths)
                if pending_paths:
                    pending.add(goal.id)
        frontier = ready_set(
            graph, frozenset(pending), frozenset(completed),
            SchedulingPolicy(max_parallel_goals=width),
        )
        assert len(frontier) <= width
        goals_seen = [n.goal_index for n in frontier]
        assert len(goals_seen) == len(set(goals_seen))  # one node per goal
        assert all(node in pending for node in frontier)
        assert not set(frontier.nodes) & completed
        # Ordered by (goal, path), and each node is its goal's lowest pending path.
        assert list(frontier) == sorted(frontier.nodes)
        for node in frontier:
            goal = graph.goal(node.goal_index)
            lowest = next(p.id for p in goal.paths if p.id in pending)
            assert node == lowest

    def test_progress_property(self):
        # If something is pending with all deps met, the frontier is non-empty.
        rng = random.Random(7)
        for _ in range(500):
            n = rng.randint(1, 5)
            edges = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1) if rng.random() < 0.4]
            graph = single_path_graph(n, edges)
            pending, completed = random_completed_split(rng, n)
            ready = brute_force_frontier(graph, pending, completed)
            if pending and ready:
                frontier = ready_set(graph, pending, completed, STRICT)
                assert len(frontier) > 0


class TestMarkComplete:
    def test_single_path_success_completes_goal(self):
        graph = single_path_graph(1)
        pending, completed = mark_complete(
            graph, full_pending(graph), frozenset(), {NodeId(1, 1): OUTCOME_SUCCEEDED}
        )
        assert completed == {NodeId(1, 1), NodeId(1)}
        assert pending == frozenset()

    def test_failed_path_exposes_fallback(self):
        graph = multi_path_graph([2])
        pending, completed = mark_complete(
            graph, full_pending(graph), frozenset(), {NodeId(1, 1): OUTCOME_FAILED}
        )
        assert completed == frozenset()
        assert pending == {NodeId(1), NodeId(1, 2)}
        assert list(ready_set(graph, pending, completed, STRICT)) == [NodeId(1, 2)]

    def test_last_path_failure_blocks_goal(self):
        graph = multi_path_graph([1])
        pending, completed = mark_complete(
            graph, full_pending(graph), frozenset(), {NodeId(1, 1): OUTCOME_FAILED}
        )
        assert pending == frozenset() and completed == frozenset()

    def test_success_removes_sibling_paths(self):
        graph = multi_path_graph([3])
        pending, completed = mark_complete(
            graph, full_pending(graph), frozenset(), {NodeId(1, 1): OUTCOME_SUCCEEDED}
        )
        assert pending == frozenset()
        assert completed == {NodeId(1), NodeId(1, 1)}

    def test_outcome_for_non_pending_rejected(self):
        graph = single_path_graph(1)
        with pytest.raises(ValueError):
            mark_complete(graph, frozenset(), frozenset({NodeId(1), NodeId(1, 1)}),
                          {NodeId(1, 1): OUTCOME_SUCCEEDED})
        with pytest.raises(UnknownNode):
            mark_complete(graph, full_pending(graph), frozenset(), {NodeId(3, 1): OUTCOME_FAILED})

    def test_two_goal_two_path_transition_table(self):
        # All 16 outcome combinations over two steps. Expected sets are
        # enumerated by hand: S on p1 completes the goal at step 1 (step
        # 2 outcome unused); F on p1 defers to p2, whose S/F resolves or
        # blocks the goal. Both goals always end terminal.
        S, F = OUTCOME_SUCCEEDED, OUTCOME_FAILED
        for a, b, c, d in itertools.product([S, F], repeat=4):
            graph = multi_path_graph([2, 2])
            pending, completed = full_pending(graph), frozenset()
            step1 = {NodeId(1, 1): a, NodeId(2, 1): b}
            pending, completed = mark_complete(graph, pending, completed, step1)
            step2 = {}
            if a == F:
                step2[NodeId(1, 2)] = c
            if b == F:
                step2[NodeId(2, 2)] = d
            pending, completed = mark_complete(graph, pending, completed, step2)

            expected = set()
            for goal, first, second in ((1, a, c), (2, b, d)):
                if first == S:
                    expected |= {NodeId(goal), NodeId(goal, 1)}
                elif second == S:
                    expected |= {NodeId(goal), NodeId(goal, 2)}
            assert pending == frozenset(), (a, b, c, d)
            assert completed == expected, (a, b, c, d)

    def test_monotonicity_completed_only_grows(self):
        rng = random.Random(5)
        for _ in range(200):
            graph = multi_path_graph([rng.randint(1, 3) for _ in range(rng.randint(1, 4))])
            pending, completed = full_pending(graph), frozenset()
            while True:
                frontier = ready_set(graph, pending, completed, STRICT)
                if not frontier:
                    break
                outcomes = {
                    node: rng.choice([OUTCOME_SUCCEEDED, OUTCOME_FAILED]) for node in frontier
                }
                new_pending, new_completed = mark_complete(graph, pending, completed, outcomes)
                assert completed <= new_completed
                assert new_pending <= pending
                pending, completed = new_pending, new_completed
            assert pending == frozenset()  # every run drains

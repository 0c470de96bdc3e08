import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from merl_maze.env import (
    DOWN, LEFT, RIGHT, UP, MOVES, Context, Maze, MazeGenerationError, dumps_dataset, execute, execute_batch,
    worked_example_context, generate_dataset, generate_maze, instruction_for, load_dataset, make_context, move,
    oracle_reward, save_dataset, shortest_path, spurious_candidates, synthesize_instruction,
    underspecified_reward,
)

from conftest import all_sequences


def bfs_distance(maze):
    """Independent BFS distance over explicit neighbour lists."""
    dist = {maze.start: 0}
    q = deque([maze.start])
    while q:
        c = q.popleft()
        for dr, dc in MOVES:
            nxt = (c[0] + dr, c[1] + dc)
            if 0 <= nxt[0] < maze.n and 0 <= nxt[1] < maze.n and nxt not in maze.traps and nxt not in dist:
                dist[nxt] = dist[c] + 1
                q.append(nxt)
    return dist.get(maze.goal)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 8), density=st.floats(0.0, 0.35))
def test_generated_maze_invariants(seed, n, density):
    k = int(density * (n * n - 2))
    maze = generate_maze(seed, n, k)
    maze.validate()
    assert maze.goal in maze.corners()
    assert len(maze.traps) == k
    assert maze.start not in maze.traps and maze.goal not in maze.traps
    gold = shortest_path(maze)
    assert gold is not None
    assert len(gold) == bfs_distance(maze)
    assert execute(maze, gold, len(gold)).reached_goal


def test_desk_scale_maze():
    maze = generate_maze(0, 7, 14)
    assert maze.n == 7 and len(maze.traps) == 14
    assert shortest_path(maze) is not None


def test_trap_free_small_maze():
    maze = generate_maze(0, 3, 0)
    assert maze.traps == frozenset()
    assert shortest_path(maze) is not None


def test_overdense_maze_raises():
    # k = n*n - 2 leaves no free cell besides start and goal; rejected up front
    with pytest.raises(ValueError):
        generate_maze(0, 3, 7)
    assert issubclass(MazeGenerationError, ValueError)


def test_seven_traps_on_3x3_mostly_unsolvable():
    # every free cell is a trap: solvable only when start is next to the goal
    corners = [(0, 0), (0, 2), (2, 0), (2, 2)]
    solvable = total = 0
    cells = [(r, c) for r in range(3) for c in range(3)]
    for goal in corners:
        for start in cells:
            if start == goal:
                continue
            rest = [c for c in cells if c not in (start, goal)]
            for traps in itertools.combinations(rest, 7):
                total += 1
                solvable += bfs_distance(Maze(3, frozenset(traps), goal, start)) is not None
    assert solvable / total < 0.5


def test_generator_determinism():
    assert generate_maze(5, 7, 14) == generate_maze(5, 7, 14)


def test_instruction_examples():
    assert instruction_for((RIGHT, UP, LEFT), reverse=True) == ("Left", "Up", "Right")
    assert instruction_for((RIGHT, UP, UP, RIGHT), reverse=False) == ("Right", "Up", "Up", "Right")
    assert instruction_for((DOWN,), True) == instruction_for((DOWN,), False)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_reversal_involution(gold):
    assert instruction_for(gold, True)[::-1] == instruction_for(gold, False)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000))
def test_gold_follows_reversed_instruction(seed):
    ctx = make_context("c", generate_maze(seed, 6, 8), reverse=True)
    L = len(ctx.instruction)
    words = {"Up": UP, "Down": DOWN, "Left": LEFT, "Right": RIGHT}
    assert all(ctx.gold[t] == words[ctx.instruction[L - 1 - t]] for t in range(L))
    assert ctx.max_steps == len(ctx.gold) + 2
    assert underspecified_reward(ctx, ctx.gold) == 1 and oracle_reward(ctx, ctx.gold) == 1


def test_synthesize_matches_shortest_path():
    maze = generate_maze(1, 7, 14)
    instruction, gold = synthesize_instruction(maze, reverse=False)
    assert gold == shortest_path(maze)
    assert instruction == instruction_for(gold, False)


def test_worked_example(example_ctx):
    a1 = (RIGHT, UP, UP, RIGHT)
    a2 = (LEFT, RIGHT, RIGHT, UP, UP, RIGHT)
    a3 = (UP, RIGHT, RIGHT, UP)
    assert example_ctx.instruction == ("Right", "Up", "Up", "Right")
    assert example_ctx.gold == a1
    assert shortest_path(example_ctx.maze) is not None and len(shortest_path(example_ctx.maze)) == 4
    for a in (a1, a2, a3):
        assert underspecified_reward(example_ctx, a) == 1
    assert execute(example_ctx.maze, a2, example_ctx.max_steps).steps_used == 6
    assert oracle_reward(example_ctx, a2) == 0 and oracle_reward(example_ctx, a3) == 0


def test_execute_semantics(example_ctx):
    maze = example_ctx.maze
    assert not execute(maze, (), 6).reached_goal
    # (2,2) -> (2,1) -> (3,1) is a trap on the second step
    r = execute(maze, (LEFT, DOWN, RIGHT), 6)
    assert r.trapped and r.steps_used == 2 and not r.reached_goal
    # wall bump keeps the position and consumes a step
    corner = Maze(3, frozenset(), (2, 2), (0, 0))
    assert move(corner, (0, 0), UP) == (0, 0)
    assert execute(corner, (UP, DOWN), 5).final_cell == (1, 0)
    assert execute(corner, (UP,) * 9, 4).steps_used == 4


def test_rewards_on_extra_actions(example_ctx):
    bumped = example_ctx.gold + (UP,)
    assert underspecified_reward(example_ctx, bumped) == 1
    assert oracle_reward(example_ctx, bumped) == 0
    assert underspecified_reward(example_ctx, (RIGHT, UP)) == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), data=st.data())
def test_execute_batch_matches_execute(seed, data):
    ctx = make_context("c", generate_maze(seed, 5, 6))
    rng = np.random.default_rng(seed)
    acts = rng.integers(0, 4, size=(50, ctx.max_steps))
    lengths = rng.integers(0, ctx.max_steps + 1, size=50)
    ok, steps = execute_batch(ctx.maze, acts, lengths, ctx.max_steps)
    for i in range(50):
        r = execute(ctx.maze, acts[i, : lengths[i]], ctx.max_steps)
        assert ok[i] == r.reached_goal and steps[i] == r.steps_used


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2000))
def test_execution_invariants_and_oracle_refinement(seed):
    ctx = make_context("c", generate_maze(seed, 3, 2))
    for L in range(ctx.max_steps + 2):
        for a in all_sequences(L):
            r = execute(ctx.maze, a, ctx.max_steps)
            assert r.steps_used <= ctx.max_steps
            assert not (r.trapped and r.reached_goal)
            if oracle_reward(ctx, a):
                assert underspecified_reward(ctx, a)


def test_spurious_candidates_worked_example(example_ctx):
    assert spurious_candidates(example_ctx, 0, 0) == []
    found = spurious_candidates(example_ctx, 2, 0)
    assert len(found) == 2 and len(set(found)) == 2
    for a in found:
        assert underspecified_reward(example_ctx, a) == 1 and oracle_reward(example_ctx, a) == 0
    assert spurious_candidates(example_ctx, 2, 0) == found


REVERSE_ACTION = {UP: DOWN, DOWN: UP, LEFT: RIGHT, RIGHT: LEFT}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000))
def test_two_step_slack_always_admits_a_detour(seed):
    # step forward, step back, then the gold path: len(gold) + 2 actions
    ctx = make_context("c", generate_maze(seed, 5, 6))
    detour = (ctx.gold[0], REVERSE_ACTION[ctx.gold[0]]) + ctx.gold
    assert underspecified_reward(ctx, detour) == 1 and oracle_reward(ctx, detour) == 0


def _unique_success_context():
    """A 3x3 context whose step budget equals the gold length and whose gold
    path is the only success, found by enumerating every action sequence."""
    for seed in range(500):
        maze = generate_maze(seed, 3, 2)
        gold = shortest_path(maze)
        ctx = Context("u", maze, instruction_for(gold), gold, len(gold))
        winners = set()
        for L in range(1, ctx.max_steps + 1):
            for a in all_sequences(L):
                r = execute(ctx.maze, a, ctx.max_steps)
                if r.reached_goal:
                    winners.add(a[: r.steps_used])
        if winners == {ctx.gold}:
            return ctx
    raise AssertionError("no unique-success context among the seeds tried")


def test_spurious_candidates_empty_when_gold_is_unique():
    ctx = _unique_success_context()
    assert spurious_candidates(ctx, 4, 0, budget=20000) == []


def test_dataset_splits_and_determinism(tmp_path):
    ds = generate_dataset(0, 7, 14, 10, 5)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (8, 2, 5)
    assert dumps_dataset(ds) == dumps_dataset(generate_dataset(0, 7, 14, 10, 5))
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert dumps_dataset(back) == dumps_dataset(ds)
    assert back.train[0] == ds.train[0]


def test_desk_dataset_sizes(desk_dataset):
    assert (len(desk_dataset.train), len(desk_dataset.val), len(desk_dataset.test)) == (240, 60, 300)
    ids = [c.id for s in desk_dataset.splits().values() for c in s]
    assert len(set(ids)) == len(ids)

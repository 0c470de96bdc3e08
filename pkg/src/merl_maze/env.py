"""Blind instruction-following maze.

A maze is an ``n x n`` grid with deadly traps and a goal in one corner.  The
agent never observes the maze: it only reads an instruction made of the words
Left/Right/Up/Down and emits an action sequence.  Cells are ``(row, col)``
with row 0 at the top, so Up decreases the row.

Action encoding is fixed (feature indices depend on it)::

    Up=0, Down=1, Left=2, Right=3
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
N_ACTIONS = 4
ACTION_NAMES = ("Up", "Down", "Left", "Right")
ACTION_ARROWS = ("↑", "↓", "←", "→")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

# instruction vocabulary, in the order used to index count features
WORDS = ("Left", "Right", "Up", "Down")
WORD_INDEX = {w: i for i, w in enumerate(WORDS)}
WORD_TO_ACTION = {"Up": UP, "Down": DOWN, "Left": LEFT, "Right": RIGHT}
ACTION_TO_WORD = {a: w for w, a in WORD_TO_ACTION.items()}

MAX_LAYOUT_ATTEMPTS = 1000
STEP_SLACK = 2

Cell = tuple[int, int]


class MazeGenerationError(ValueError):
    """Raised when no solvable layout is found for the requested density."""


@dataclass(frozen=True)
class Maze:
    n: int
    traps: frozenset[Cell]
    goal: Cell
    start: Cell

    def corners(self) -> tuple[Cell, ...]:
        m = self.n - 1
        return ((0, 0), (0, m), (m, 0), (m, m))

    def in_grid(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.n and 0 <= cell[1] < self.n

    def validate(self) -> None:
        if self.goal not in self.corners():
            raise ValueError(f"goal {self.goal} is not a corner")
        if self.start == self.goal:
            raise ValueError("start coincides with goal")
        if self.start in self.traps or self.goal in self.traps:
            raise ValueError("start or goal is a trap")
        for cell in (self.start, self.goal, *self.traps):
            if not self.in_grid(cell):
                raise ValueError(f"cell {cell} outside the {self.n}x{self.n} grid")


@dataclass(frozen=True)
class ExecutionResult:
    reached_goal: bool
    trapped: bool
    final_cell: Cell
    steps_used: int


@dataclass(frozen=True)
class Context:
    id: str
    maze: Maze
    instruction: tuple[str, ...]
    gold: tuple[int, ...]
    max_steps: int
    reverse: bool = True


@dataclass
class Dataset:
    train: list[Context]
    val: list[Context]
    test: list[Context]
    seed: int
    gen_params: dict = field(default_factory=dict)

    def splits(self) -> dict[str, list[Context]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def by_id(self) -> dict[str, Context]:
        return {c.id: c for split in self.splits().values() for c in split}


def move(maze: Maze, cell: Cell, action: int) -> Cell:
    dr, dc = MOVES[action]
    nxt = (cell[0] + dr, cell[1] + dc)
    # off-grid moves bump the wall: position unchanged, step still consumed
    return nxt if maze.in_grid(nxt) else cell


def shortest_path(maze: Maze) -> tuple[int, ...] | None:
    """BFS from start to goal avoiding traps.

    Neighbours are expanded in action order Up<Down<Left<Right and each cell
    keeps the first parent that discovers it, which fixes the tie-breaking.
    """
    parent: dict[Cell, tuple[Cell, int]] = {}
    seen = {maze.start}
    queue = deque([maze.start])
    while queue:
        cell = queue.popleft()
        if cell == maze.goal:
            break
        for a in range(N_ACTIONS):
            nxt = move(maze, cell, a)
            if nxt in seen or nxt in maze.traps:
                continue
            seen.add(nxt)
            parent[nxt] = (cell, a)
            queue.append(nxt)
    if maze.goal not in seen:
        return None
    actions = []
    cell = maze.goal
    while cell != maze.start:
        cell, a = parent[cell]
        actions.append(a)
    return tuple(reversed(actions))


def generate_maze(seed: int | np.random.Generator, n: int, k: int) -> Maze:
    """Sample a solvable ``n x n`` maze with ``k`` traps and a corner goal."""
    if n < 3:
        raise ValueError(f"grid side must be at least 3, got {n}")
    if not 0 <= k < n * n - 2:
        raise ValueError(f"need 0 <= k < n*n - 2 = {n * n - 2}, got k={k}")
    rng = np.random.default_rng(seed)
    m = n - 1
    corners = ((0, 0), (0, m), (m, 0), (m, m))
    cells = [(r, c) for r in range(n) for c in range(n)]
    for _ in range(MAX_LAYOUT_ATTEMPTS):
        goal = corners[int(rng.integers(4))]
        free = [c for c in cells if c != goal]
        start = free[int(rng.integers(len(free)))]
        rest = [c for c in free if c != start]
        picks = rng.choice(len(rest), size=k, replace=False)
        maze = Maze(n, frozenset(rest[i] for i in picks), goal, start)
        if shortest_path(maze) is not None:
            return maze
    raise MazeGenerationError(
        f"no solvable layout in {MAX_LAYOUT_ATTEMPTS} attempts for n={n}, k={k}"
    )


def synthesize_instruction(
    maze: Maze, reverse: bool = True
) -> tuple[tuple[str, ...], tuple[int, ...]]:
    """Return ``(instruction, gold)``; one word per gold action.

    With ``reverse`` the words name the gold actions back to front, so the
    command "Left Up Right" means the actions (Right, Up, Left).
    """
    gold = shortest_path(maze)
    if gold is None:
        raise ValueError("maze has no trap-free path from start to goal")
    return instruction_for(gold, reverse), gold


def instruction_for(gold: Sequence[int], reverse: bool = True) -> tuple[str, ...]:
    words = tuple(ACTION_TO_WORD[int(a)] for a in gold)
    return words[::-1] if reverse else words


def execute(maze: Maze, actions: Iterable[int], max_steps: int) -> ExecutionResult:
    cell = maze.start
    steps = 0
    for a in actions:
        if steps >= max_steps:
            break
        cell = move(maze, cell, int(a))
        steps += 1
        if cell in maze.traps:
            return ExecutionResult(False, True, cell, steps)
        if cell == maze.goal:
            return ExecutionResult(True, False, cell, steps)
    return ExecutionResult(False, False, cell, steps)


def execute_batch(
    maze: Maze, actions: np.ndarray, lengths: np.ndarray, max_steps: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`execute` over a padded ``(m, T)`` action array.

    Returns ``(reached_goal, steps_used)``.
    """
    m, t_max = actions.shape
    trap_grid = np.zeros((maze.n, maze.n), dtype=bool)
    for r, c in maze.traps:
        trap_grid[r, c] = True
    moves = np.asarray(MOVES)
    pos = np.tile(np.asarray(maze.start), (m, 1))
    alive = np.ones(m, dtype=bool)
    success = np.zeros(m, dtype=bool)
    steps = np.zeros(m, dtype=int)
    for t in range(min(t_max, max_steps)):
        active = alive & (t < lengths)
        if not active.any():
            break
        nxt = pos + moves[actions[:, t]]
        inside = ((nxt >= 0) & (nxt < maze.n)).all(axis=1)
        nxt = np.where(inside[:, None], nxt, pos)
        pos = np.where(active[:, None], nxt, pos)
        steps += active
        hit_trap = active & trap_grid[pos[:, 0], pos[:, 1]]
        hit_goal = active & (pos[:, 0] == maze.goal[0]) & (pos[:, 1] == maze.goal[1])
        success |= hit_goal
        alive &= ~(hit_trap | hit_goal)
    return success, steps


def underspecified_reward(ctx: Context, actions: Sequence[int]) -> int:
    return int(execute(ctx.maze, actions, ctx.max_steps).reached_goal)


def oracle_reward(ctx: Context, actions: Sequence[int]) -> int:
    return int(tuple(int(a) for a in actions) == ctx.gold)


def make_context(ctx_id: str, maze: Maze, reverse: bool = True) -> Context:
    instruction, gold = synthesize_instruction(maze, reverse)
    return Context(ctx_id, maze, instruction, gold, len(gold) + STEP_SLACK, reverse)


def spurious_candidates(
    ctx: Context, n_spurious: int, seed: int | np.random.Generator, budget: int = 100000
) -> list[tuple[int, ...]]:
    """Successful non-gold trajectories found by uniform random search.

    Lengths are drawn uniformly from ``len(gold)..max_steps`` (nothing
    shorter than the gold path can succeed) and actions uniformly.
    Each success is cut at the step where the environment halts it, so two
    samples that differ only after reaching the goal count once.  The first
    ``n_spurious`` distinct successes in sampling order are returned.
    """
    if n_spurious <= 0:
        return []
    rng = np.random.default_rng(seed)
    found: list[tuple[int, ...]] = []
    seen = {ctx.gold}
    chunk = 5000
    for start in range(0, budget, chunk):
        size = min(chunk, budget - start)
        lengths = rng.integers(len(ctx.gold), ctx.max_steps + 1, size=size)
        actions = rng.integers(0, N_ACTIONS, size=(size, ctx.max_steps))
        ok, steps = execute_batch(ctx.maze, actions, lengths, ctx.max_steps)
        for i in np.flatnonzero(ok):
            traj = tuple(int(a) for a in actions[i, : steps[i]])
            if traj in seen:
                continue
            seen.add(traj)
            found.append(traj)
            if len(found) == n_spurious:
                return found
    return found


def generate_dataset(
    seed: int,
    n: int = 7,
    k: int = 14,
    n_train_val: int = 300,
    n_test: int = 300,
    reverse: bool = True,
) -> Dataset:
    if n_train_val <= 0 or n_test <= 0:
        raise ValueError("split sizes must be positive")
    rng = np.random.default_rng(seed)
    n_train = int(round(0.8 * n_train_val))
    contexts = []
    for i in range(n_train_val + n_test):
        maze = generate_maze(rng, n, k)
        if i < n_train:
            ctx_id = f"train-{i:04d}"
        elif i < n_train_val:
            ctx_id = f"val-{i - n_train:04d}"
        else:
            ctx_id = f"test-{i - n_train_val:04d}"
        contexts.append(make_context(ctx_id, maze, reverse))
    return Dataset(
        train=contexts[:n_train],
        val=contexts[n_train:n_train_val],
        test=contexts[n_train_val:],
        seed=seed,
        gen_params={"n": n, "k": k, "n_train_val": n_train_val, "n_test": n_test, "reverse": reverse},
    )


# -- JSON-lines serialisation ------------------------------------------------

def context_to_dict(ctx: Context, split: str) -> dict:
    m = ctx.maze
    return {
        "id": ctx.id,
        "split": split,
        "n": m.n,
        "traps": sorted([list(t) for t in m.traps]),
        "start": list(m.start),
        "goal": list(m.goal),
        "instruction": list(ctx.instruction),
        "gold": list(ctx.gold),
        "max_steps": ctx.max_steps,
        "reverse": ctx.reverse,
    }


def context_from_dict(d: dict) -> Context:
    maze = Maze(
        n=int(d["n"]),
        traps=frozenset(tuple(t) for t in d["traps"]),
        goal=tuple(d["goal"]),
        start=tuple(d["start"]),
    )
    return Context(
        id=d["id"],
        maze=maze,
        instruction=tuple(d["instruction"]),
        gold=tuple(int(a) for a in d["gold"]),
        max_steps=int(d["max_steps"]),
        reverse=bool(d.get("reverse", True)),
    )


def dumps_dataset(ds: Dataset) -> str:
    lines = [json.dumps({"meta": {"seed": ds.seed, **ds.gen_params}}, sort_keys=True)]
    for split, contexts in ds.splits().items():
        lines += [json.dumps(context_to_dict(c, split), sort_keys=True) for c in contexts]
    return "\n".join(lines) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    splits: dict[str, list[Context]] = {"train": [], "val": [], "test": []}
    meta: dict = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            if "meta" in d:
                meta = d["meta"]
                continue
            splits[d["split"]].append(context_from_dict(d))
    seed = int(meta.pop("seed", 0))
    return Dataset(splits["train"], splits["val"], splits["test"], seed, meta)


def worked_example_context() -> Context:
    """Hand-built 5x5 maze reproducing the worked example (instruction, gold path and two detours).

    The instruction "Right Up Up Right" has gold (→, ↑, ↑, →); the detour
    (←, →, →, ↑, ↑, →) and the alternative route (↑, →, →, ↑) also succeed.
    """
    maze = Maze(
        n=5,
        traps=frozenset({(0, 2), (1, 1), (3, 3), (3, 1), (4, 4)}),
        goal=(0, 4),
        start=(2, 2),
    )
    gold = (RIGHT, UP, UP, RIGHT)
    return Context("example_ctx", maze, instruction_for(gold, True), gold, len(gold) + STEP_SLACK, True)

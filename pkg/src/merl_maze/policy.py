"""Featurized autoregressive softmax policy over action sequences.

At step ``t`` the logit of candidate action ``c`` is ``theta . phi(t, c)``.
The base feature set has 36 binary features:

* 16 alignment features ``[aligned word == w and c]`` (index ``4*w + c``),
  the aligned word being ``x[clamp(L-1-t)]`` under reversal, ``x[clamp(t)]``
  otherwise;
* 16 bigram features ``[previous action == d and c]`` (index ``16 + 4*d + c``),
  silent at step 0;
* 4 bias features ``[c]`` (index ``32 + c``).

These only see the aligned word and the previous action, so the base step
distribution is a function of one of 20 *states* ``(word, prev)``.  The
optional positional block adds one-hot features on
``(instruction length, step, aligned word, prev, c)``.  That block is fine
grained enough to memorise individual training instructions, which gives the
model the capacity to overfit spurious trajectories.  ``base_scale`` is the
value taken by an active base feature (1 for the plain 36-feature policy).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse

from .env import N_ACTIONS, WORD_INDEX, WORD_TO_ACTION, WORDS, Context, execute, move

N_WORDS = len(WORDS)
N_PREV = N_ACTIONS + 1  # last slot is "no previous action"
NO_PREV = N_ACTIONS
N_STATES = N_WORDS * N_PREV
BASE_DIM = 36
ALIGN, BIGRAM, BIAS = 0, 16, 32


def _feature_table() -> np.ndarray:
    phi = np.zeros((N_STATES, N_ACTIONS, BASE_DIM))
    for w in range(N_WORDS):
        for d in range(N_PREV):
            s = w * N_PREV + d
            for c in range(N_ACTIONS):
                phi[s, c, ALIGN + 4 * w + c] = 1.0
                if d != NO_PREV:
                    phi[s, c, BIGRAM + 4 * d + c] = 1.0
                phi[s, c, BIAS + c] = 1.0
    return phi


PHI = _feature_table()
PHI_FLAT = PHI.reshape(N_STATES * N_ACTIONS, BASE_DIM)


def aligned_word(instruction: Sequence[str], t: int, reverse: bool) -> int:
    L = len(instruction)
    if L == 0:
        raise ValueError("policy needs a non-empty instruction")
    pos = L - 1 - t if reverse else t
    return WORD_INDEX[instruction[min(max(pos, 0), L - 1)]]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class StepBatch:
    """Flattened steps of a batch of trajectories.

    ``state[i]`` / ``slot[i]`` / ``action[i]`` describe step ``i``, which
    belongs to trajectory ``owner[i]``.  ``slot`` is -1 when the policy has
    no positional block.
    """

    state: np.ndarray
    slot: np.ndarray
    action: np.ndarray
    owner: np.ndarray
    size: int
    n_slots: int

    def __len__(self) -> int:
        return self.size

    @cached_property
    def state_onehot(self) -> sparse.csr_matrix:
        n = len(self.state)
        return sparse.csr_matrix((np.ones(n), (self.state, np.arange(n))), shape=(N_STATES, n))

    @cached_property
    def slot_onehot(self) -> sparse.csr_matrix:
        n = len(self.slot)
        return sparse.csr_matrix((np.ones(n), (self.slot, np.arange(n))), shape=(self.n_slots, n))

    @cached_property
    def owner_onehot(self) -> sparse.csr_matrix:
        n = len(self.owner)
        return sparse.csr_matrix((np.ones(n), (self.owner, np.arange(n))), shape=(self.size, n))


@dataclass(frozen=True)
class Policy:
    base_scale: float = 1.0
    positional: bool = False
    max_len: int = 16

    @property
    def n_slots(self) -> int:
        return self.max_len * self.max_len * N_STATES if self.positional else 0

    @property
    def dim(self) -> int:
        return BASE_DIM + N_ACTIONS * self.n_slots

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def gold_encoding(self, strength: float = 10.0) -> np.ndarray:
        """Weights whose logits favour the aligned word's action by ``strength``."""
        theta = self.init_params()
        for w, word in enumerate(WORDS):
            theta[ALIGN + 4 * w + WORD_TO_ACTION[word]] = strength / self.base_scale
        return theta

    def to_dict(self) -> dict:
        return {"base_scale": self.base_scale, "positional": self.positional, "max_len": self.max_len}

    # -- per-step structure -------------------------------------------------

    def state(self, ctx: Context, t: int, prev: int) -> int:
        return aligned_word(ctx.instruction, t, ctx.reverse) * N_PREV + prev

    def slot(self, ctx: Context, t: int, prev: int) -> int:
        if not self.positional:
            return -1
        m = self.max_len
        L = min(len(ctx.instruction), m) - 1
        return ((L * m + min(t, m - 1)) * N_STATES) + self.state(ctx, t, prev)

    def tables(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        base = self.base_scale * (PHI @ theta[:BASE_DIM])
        pos = theta[BASE_DIM:].reshape(self.n_slots, N_ACTIONS) if self.positional else None
        return base, pos

    def step_features(self, ctx: Context, prefix: Sequence[int], t: int | None = None) -> np.ndarray:
        """Dense ``(4, dim)`` feature rows for step ``t = len(prefix)``."""
        t = len(prefix) if t is None else t
        prev = int(prefix[-1]) if len(prefix) else NO_PREV
        rows = np.zeros((N_ACTIONS, self.dim))
        rows[:, :BASE_DIM] = self.base_scale * PHI[self.state(ctx, t, prev)]
        if self.positional:
            e = self.slot(ctx, t, prev)
            rows[np.arange(N_ACTIONS), BASE_DIM + N_ACTIONS * e + np.arange(N_ACTIONS)] = 1.0
        return rows

    def step_logits(self, theta: np.ndarray, ctx: Context, prefix: Sequence[int], t: int | None = None) -> np.ndarray:
        t = len(prefix) if t is None else t
        prev = int(prefix[-1]) if len(prefix) else NO_PREV
        base, pos = self.tables(theta)
        z = base[self.state(ctx, t, prev)].copy()
        if pos is not None:
            z += pos[self.slot(ctx, t, prev)]
        return z

    # -- batches --------------------------------------------------------------

    def batch(self, items: Sequence[tuple[Context, Sequence[int]]]) -> StepBatch:
        states, slots, actions, owner = [], [], [], []
        for j, (ctx, acts) in enumerate(items):
            prev = NO_PREV
            for t, a in enumerate(acts):
                states.append(self.state(ctx, t, prev))
                slots.append(self.slot(ctx, t, prev))
                actions.append(int(a))
                owner.append(j)
                prev = int(a)
        return StepBatch(
            np.asarray(states, dtype=int), np.asarray(slots, dtype=int),
            np.asarray(actions, dtype=int), np.asarray(owner, dtype=int), len(items), self.n_slots,
        )

    def _step_log_probs(self, theta: np.ndarray, sb: StepBatch) -> np.ndarray:
        base, pos = self.tables(theta)
        z = base[sb.state]
        if pos is not None:
            z = z + pos[sb.slot]
        return _log_softmax(z)

    def log_probs(self, theta: np.ndarray, sb: StepBatch) -> np.ndarray:
        lz = self._step_log_probs(theta, sb)
        return np.bincount(sb.owner, lz[np.arange(len(sb.action)), sb.action], minlength=sb.size)

    def weighted_score(self, theta: np.ndarray, sb: StepBatch, weights: np.ndarray) -> np.ndarray:
        """``sum_j weights[j] * grad log pi(a_j)``.

        ``weights`` may be ``(m,)`` or ``(m, k)``; the result is ``(dim,)`` or
        ``(dim, k)`` accordingly.
        """
        weights = np.asarray(weights, dtype=float)
        vec = weights.ndim == 1
        W = weights[:, None] if vec else weights
        k = W.shape[1]
        lz = self._step_log_probs(theta, sb)
        d = -np.exp(lz)
        d[np.arange(len(sb.action)), sb.action] += 1.0
        D = (d[:, :, None] * W[sb.owner][:, None, :]).reshape(len(sb.action), N_ACTIONS * k)
        out = np.zeros((self.dim, k))
        base = (sb.state_onehot @ D).reshape(N_STATES * N_ACTIONS, k)
        out[:BASE_DIM] = self.base_scale * (PHI_FLAT.T @ base)
        if self.positional:
            out[BASE_DIM:] = (sb.slot_onehot @ D).reshape(self.n_slots * N_ACTIONS, k)
        return out[:, 0] if vec else out

    def score_dot(self, theta: np.ndarray, sb: StepBatch, g: np.ndarray) -> np.ndarray:
        """``grad log pi(a_j) . g`` for every trajectory ``j`` in the batch."""
        lz = self._step_log_probs(theta, sb)
        d = -np.exp(lz)
        d[np.arange(len(sb.action)), sb.action] += 1.0
        per_action = self.base_scale * (PHI @ g[:BASE_DIM])[sb.state]
        if self.positional:
            per_action = per_action + g[BASE_DIM:].reshape(self.n_slots, N_ACTIONS)[sb.slot]
        return np.bincount(sb.owner, (d * per_action).sum(axis=1), minlength=sb.size)

    def scores(self, theta: np.ndarray, sb: StepBatch) -> np.ndarray:
        """Dense per-trajectory scores ``(m, dim)``; meant for small batches."""
        return self.weighted_score(theta, sb, np.eye(sb.size)).T

    # -- single trajectories --------------------------------------------------

    def log_prob(self, theta: np.ndarray, ctx: Context, actions: Sequence[int]) -> float:
        return float(self.log_probs(theta, self.batch([(ctx, actions)]))[0])

    def grad_log_prob(self, theta: np.ndarray, ctx: Context, actions: Sequence[int]) -> np.ndarray:
        return self.weighted_score(theta, self.batch([(ctx, actions)]), np.ones(1))

    # -- decoding ---------------------------------------------------------------

    def sample_batch(
        self,
        theta: np.ndarray,
        contexts: Sequence[Context],
        n_per_context: int,
        rng: np.random.Generator,
        lengths: Sequence[Sequence[int]] | None = None,
        halt: bool = True,
    ) -> list[list[tuple[int, ...]]]:
        """``n_per_context`` sampled trajectories for every context.

        A length is drawn from ``lengths`` (default :func:`length_choices`),
        then actions step by step.  With ``halt`` a trajectory is cut where
        the environment stops it (goal or trap).
        """
        if not contexts or n_per_context <= 0:
            return [[] for _ in contexts]
        if lengths is None:
            lengths = [length_choices(c) for c in contexts]
        owner = np.repeat(np.arange(len(contexts)), n_per_context)
        t_len = np.concatenate([np.asarray(ls)[rng.integers(len(ls), size=n_per_context)] for ls in lengths])
        t_max = int(t_len.max())
        m = len(owner)
        base, pos = self.tables(theta)
        states = np.array([[aligned_word(c.instruction, t, c.reverse) for t in range(t_max)] for c in contexts])
        states = states[owner] * N_PREV
        if pos is not None:
            mm = self.max_len
            head = np.array([
                [(min(len(c.instruction), mm) - 1) * mm + min(t, mm - 1) for t in range(t_max)] for c in contexts
            ])[owner] * N_STATES
        u = rng.random((m, t_max))
        actions = np.zeros((m, t_max), dtype=int)
        prev = np.full(m, NO_PREV)
        for t in range(t_max):
            s = states[:, t] + prev
            z = base[s]
            if pos is not None:
                z = z + pos[head[:, t] + s]
            cdf = np.cumsum(np.exp(_log_softmax(z)), axis=1)
            a = np.minimum((u[:, t, None] > cdf).sum(axis=1), N_ACTIONS - 1)
            actions[:, t] = a
            prev = a
        out: list[list[tuple[int, ...]]] = [[] for _ in contexts]
        for i in range(m):
            ctx = contexts[owner[i]]
            acts = actions[i, : t_len[i]]
            if halt:
                acts = acts[: execute(ctx.maze, acts, ctx.max_steps).steps_used]
            out[owner[i]].append(tuple(int(a) for a in acts))
        return out

    def sample(
        self,
        theta: np.ndarray,
        ctx: Context,
        rng: np.random.Generator,
        lengths: Sequence[int] | None = None,
        halt: bool = True,
    ) -> tuple[int, ...]:
        return self.sample_batch(theta, [ctx], 1, rng, None if lengths is None else [lengths], halt)[0][0]

    def greedy_decode(self, theta: np.ndarray, ctx: Context, interactive: bool = True) -> tuple[int, ...]:
        """Step-wise argmax decoding; ties go to the lowest action index.

        Interactive decoding keeps going until the environment halts the agent
        (goal or trap) or the step budget runs out.  Otherwise exactly
        ``len(instruction)`` actions are emitted.
        """
        base, pos = self.tables(theta)
        horizon = ctx.max_steps if interactive else len(ctx.instruction)
        maze = ctx.maze
        cell = maze.start
        prev = NO_PREV
        out: list[int] = []
        for t in range(horizon):
            z = base[self.state(ctx, t, prev)]
            if pos is not None:
                z = z + pos[self.slot(ctx, t, prev)]
            a = int(np.argmax(z))
            out.append(a)
            prev = a
            if interactive:
                cell = move(maze, cell, a)
                if cell == maze.goal or cell in maze.traps:
                    break
        return tuple(out)


BASE_POLICY = Policy()


def length_choices(ctx: Context) -> np.ndarray:
    """Lengths a sampled trajectory may take: ``L-1 .. L+2`` within budget."""
    L = len(ctx.instruction)
    lo, hi = max(1, L - 1), min(L + 2, ctx.max_steps)
    return np.arange(lo, hi + 1)

"""Training objectives over a memory buffer of successful trajectories.

All estimators return the gradient of an objective to *maximise*.  The
buffer objectives (IML, MML, RAML, MAPO) all have the form
``sum_x sum_a weight(x, a) * grad log pi(a | x)`` with different weights, so
each one builds a weight vector and hands it to
:meth:`Policy.weighted_score`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .env import N_ACTIONS, Context, execute, execute_batch, oracle_reward, underspecified_reward
from .policy import Policy, StepBatch

BUFFER_CAP = 10
OBJECTIVES = ("iml", "mml", "raml", "mapo")

Trajectory = tuple[int, ...]
RewardFn = Callable[[Context, Sequence[int]], float]

REWARD_CHANNELS: dict[str, RewardFn] = {
    "underspecified": underspecified_reward,
    "oracle": oracle_reward,
}


def reward_channel(name_or_fn: str | RewardFn) -> RewardFn:
    if callable(name_or_fn):
        return name_or_fn
    try:
        return REWARD_CHANNELS[name_or_fn]
    except KeyError:
        raise ValueError(f"unknown reward channel {name_or_fn!r}") from None


class ExperienceBuffer:
    """Per-context store of distinct successful trajectories.

    Insertion order is kept; a context holds at most ``cap`` trajectories and
    later additions beyond the cap are dropped.
    """

    def __init__(self, cap: int = BUFFER_CAP):
        self.cap = cap
        self._data: dict[str, list[Trajectory]] = {}
        self._sets: dict[str, set[Trajectory]] = {}
        self.version = 0

    def add(self, ctx_id: str, traj: Iterable[int]) -> bool:
        traj = tuple(int(a) for a in traj)
        seen = self._sets.setdefault(ctx_id, set())
        items = self._data.setdefault(ctx_id, [])
        if traj in seen or len(items) >= self.cap:
            return False
        seen.add(traj)
        items.append(traj)
        self.version += 1
        return True

    def get(self, ctx_id: str) -> list[Trajectory]:
        return list(self._data.get(ctx_id, []))

    def contains(self, ctx_id: str, traj: Sequence[int]) -> bool:
        return tuple(traj) in self._sets.get(ctx_id, ())

    def size(self, ctx_id: str) -> int:
        return len(self._data.get(ctx_id, []))

    def total(self) -> int:
        return sum(len(v) for v in self._data.values())

    def ids(self) -> list[str]:
        return [k for k, v in self._data.items() if v]

    def copy(self) -> "ExperienceBuffer":
        out = ExperienceBuffer(self.cap)
        for k, v in self._data.items():
            for traj in v:
                out.add(k, traj)
        return out

    def filtered(self, keep: Callable[[str, list[Trajectory]], list[Trajectory]]) -> "ExperienceBuffer":
        out = ExperienceBuffer(self.cap)
        for k, v in self._data.items():
            for traj in keep(k, list(v)):
                out.add(k, traj)
        return out

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"cap": self.cap}) + "\n")
            for k in sorted(self._data):
                f.write(json.dumps({"id": k, "trajectories": [list(t) for t in self._data[k]]}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "ExperienceBuffer":
        lines = Path(path).read_text().splitlines()
        out = cls(json.loads(lines[0])["cap"])
        for line in lines[1:]:
            d = json.loads(line)
            for traj in d["trajectories"]:
                out.add(d["id"], traj)
        return out


def check_buffer(buffer: ExperienceBuffer, contexts: Sequence[Context], reward: str | RewardFn = "underspecified") -> None:
    """Raise if any buffered trajectory is a duplicate or has zero reward."""
    fn = reward_channel(reward)
    for ctx in contexts:
        items = buffer.get(ctx.id)
        if len(set(items)) != len(items) or len(items) > buffer.cap:
            raise AssertionError(f"buffer for {ctx.id} has duplicates or exceeds its cap")
        for traj in items:
            if fn(ctx, traj) <= 0:
                raise AssertionError(f"buffer for {ctx.id} holds a zero-reward trajectory {traj}")


@dataclass
class BufferBatch:
    """Buffered trajectories of a fixed context list flattened for the policy."""

    contexts: list[Context]
    trajectories: list[Trajectory]
    group: np.ndarray  # index into ``contexts`` for every trajectory
    steps: StepBatch

    @classmethod
    def build(cls, policy: Policy, contexts: Sequence[Context], buffer: ExperienceBuffer) -> "BufferBatch":
        items, group = [], []
        for i, ctx in enumerate(contexts):
            for traj in buffer.get(ctx.id):
                items.append((ctx, traj))
                group.append(i)
        return cls(list(contexts), [t for _, t in items], np.asarray(group, dtype=int), policy.batch(items))

    def __len__(self) -> int:
        return len(self.trajectories)


def group_softmax(logits: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
    """Softmax of ``logits`` within each group."""
    if len(logits) == 0:
        return np.zeros(0)
    mx = np.full(n_groups, -np.inf)
    np.maximum.at(mx, group, logits)
    e = np.exp(logits - mx[group])
    return e / np.bincount(group, e, minlength=n_groups)[group]


def group_logsumexp(logits: np.ndarray, group: np.ndarray, n_groups: int) -> np.ndarray:
    mx = np.full(n_groups, -np.inf)
    np.maximum.at(mx, group, logits)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    s = np.bincount(group, np.exp(logits - safe[group]), minlength=n_groups)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, np.log(np.where(s > 0, s, 1.0)) + safe, -np.inf)


# -- buffer weights for each objective ---------------------------------------


def iml_weights(bb: BufferBatch) -> np.ndarray:
    """IML: each buffered trajectory gets ``1 / |B(x)|``."""
    counts = np.bincount(bb.group, minlength=len(bb.contexts))
    return 1.0 / counts[bb.group] if len(bb) else np.zeros(0)


def mml_weights(policy: Policy, theta: np.ndarray, bb: BufferBatch) -> np.ndarray:
    """MML: the policy renormalised over the buffer, ``pi(a) / pi(B)``."""
    return group_softmax(policy.log_probs(theta, bb.steps), bb.group, len(bb.contexts))


def raml_weights(rewards: np.ndarray, temperature: float, group: np.ndarray | None = None, n_groups: int = 1) -> np.ndarray:
    """RAML: ``softmax(R / temperature)`` within each context."""
    rewards = np.asarray(rewards, dtype=float)
    if temperature <= 0:
        raise ValueError("RAML temperature must be positive")
    group = np.zeros(len(rewards), dtype=int) if group is None else group
    return group_softmax(rewards / temperature, group, n_groups)


def iml_gradient(policy: Policy, theta: np.ndarray, bb: BufferBatch) -> np.ndarray:
    return policy.weighted_score(theta, bb.steps, iml_weights(bb))


def mml_gradient(policy: Policy, theta: np.ndarray, bb: BufferBatch) -> np.ndarray:
    return policy.weighted_score(theta, bb.steps, mml_weights(policy, theta, bb))


def raml_gradient(policy: Policy, theta: np.ndarray, bb: BufferBatch, rewards: np.ndarray, temperature: float) -> np.ndarray:
    w = raml_weights(rewards, temperature, bb.group, len(bb.contexts))
    return policy.weighted_score(theta, bb.steps, w)


def buffer_weight(log_pi_buffer: np.ndarray, clip: float) -> np.ndarray:
    """``w = clip(pi(B), clip, 1)``.

    Buffers mixing trajectories of different lengths are not prefix free, so
    ``pi(B)`` can exceed 1; capping keeps the outside weight ``1 - w`` >= 0.
    """
    with np.errstate(over="ignore"):
        pb = np.exp(np.minimum(log_pi_buffer, 0.0))
    return np.clip(pb, clip, 1.0)


def mapo_gradient(
    policy: Policy,
    theta: np.ndarray,
    bb: BufferBatch,
    buffer: ExperienceBuffer,
    rewards: np.ndarray | None = None,
    reward: str | RewardFn = "underspecified",
    entropy: float = 0.0,
    clip: float = 0.1,
    n_samples: int = 0,
    rng: np.random.Generator | None = None,
    sample_lengths: Sequence[Sequence[int]] | None = None,
    halt: bool = True,
) -> tuple[np.ndarray, dict]:
    """MAPO gradient: exact sum inside the buffer, sampled term outside it.

    Inside, ``w(x) * sum_{a in B} pi(a)/pi(B) * R'(a) * score(a)``; outside,
    ``n_samples`` on-policy draws per context are kept only when not in the
    buffer and each accepted draw gets ``(1 - w(x)) / n_accepted``.
    ``R' = R - entropy * log pi`` folds the entropy bonus into the reward.
    ``rewards`` are the buffered trajectories' rewards (1 when omitted).
    ``sample_lengths`` and ``halt`` are passed to :meth:`Policy.sample_batch`.
    """
    n_ctx = len(bb.contexts)
    lp = policy.log_probs(theta, bb.steps)
    r_in = np.ones(len(bb)) if rewards is None else np.asarray(rewards, dtype=float)
    w = buffer_weight(group_logsumexp(lp, bb.group, n_ctx), clip)
    has_buffer = np.bincount(bb.group, minlength=n_ctx) > 0
    w = np.where(has_buffer, w, 0.0)
    inside = w[bb.group] * group_softmax(lp, bb.group, n_ctx) * (r_in - entropy * lp)
    grad = policy.weighted_score(theta, bb.steps, inside) if len(bb) else np.zeros(policy.dim)
    info = {"buffer_weight": w, "accepted": 0}
    if n_samples > 0:
        if rng is None:
            raise ValueError("outside-buffer sampling needs an rng")
        fn = reward_channel(reward)
        draws = policy.sample_batch(theta, bb.contexts, n_samples, rng, sample_lengths, halt)
        items, weights_r, owner = [], [], []
        for i, (ctx, trajs) in enumerate(zip(bb.contexts, draws)):
            acc = [t for t in trajs if t and not buffer.contains(ctx.id, t)]
            for t in acc:
                items.append((ctx, t))
                weights_r.append(fn(ctx, t))
                owner.append(i)
        if items:
            sb = policy.batch(items)
            owner = np.asarray(owner)
            lp_out = policy.log_probs(theta, sb)
            n_acc = np.bincount(owner, minlength=n_ctx)
            coef = (1.0 - w[owner]) / n_acc[owner] * (np.asarray(weights_r, dtype=float) - entropy * lp_out)
            grad = grad + policy.weighted_score(theta, sb, coef)
            info["accepted"] = len(items)
    return grad, info


# -- exploration ----------------------------------------------------------------


def collect_explore(
    policy: Policy,
    theta: np.ndarray,
    buffer: ExperienceBuffer,
    contexts: Sequence[Context],
    reward: str | RewardFn,
    n_explore: int,
    rng: np.random.Generator,
) -> int:
    """Sample ``n_explore`` trajectories per context; buffer the successes."""
    fn = reward_channel(reward)
    added = 0
    for ctx, trajs in zip(contexts, policy.sample_batch(theta, contexts, n_explore, rng)):
        for t in trajs:
            if t and fn(ctx, t) > 0 and buffer.add(ctx.id, t):
                added += 1
    return added


def random_search(
    contexts: Sequence[Context],
    budget: int,
    rng: np.random.Generator,
    reward: str | RewardFn = "underspecified",
    buffer: ExperienceBuffer | None = None,
) -> ExperienceBuffer:
    """Uniform random action sequences, ``budget`` per context.

    Lengths are uniform on ``1..max_steps`` and each trajectory is cut where
    the environment halts it.  Successes fill ``buffer`` up to its cap.
    """
    buffer = ExperienceBuffer() if buffer is None else buffer
    fn = reward_channel(reward)
    fast = fn is underspecified_reward
    for ctx in contexts:
        lengths = rng.integers(1, ctx.max_steps + 1, size=budget)
        actions = rng.integers(0, N_ACTIONS, size=(budget, ctx.max_steps))
        ok, steps = execute_batch(ctx.maze, actions, lengths, ctx.max_steps)
        idx = np.flatnonzero(ok) if fast else np.arange(budget)
        for i in idx:
            traj = tuple(int(a) for a in actions[i, : (steps[i] if fast else lengths[i])])
            if not fast:
                traj = traj[: execute(ctx.maze, traj, ctx.max_steps).steps_used]
                if not traj or fn(ctx, traj) <= 0:
                    continue
            buffer.add(ctx.id, traj)
            if buffer.size(ctx.id) >= buffer.cap:
                break
    return buffer


# -- optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0)


def clip_global_norm(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    clip_norm: float | None = None,
    maximize: bool = True,
) -> tuple[np.ndarray, AdamState]:
    """One Adam update; ascends ``grad`` unless ``maximize`` is False."""
    g = clip_global_norm(np.asarray(grad, dtype=float), clip_norm)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * g
    v = b2 * state.v + (1 - b2) * g * g
    step = lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return (params + step if maximize else params - step), AdamState(m, v, t)


@dataclass
class TrainConfig:
    objective: str = "mapo"
    epochs: int = 300
    lr: float = 0.05
    entropy: float = 0.01
    clip_weight: float = 0.1
    raml_temperature: float = 1.0
    n_samples: int = 0
    n_explore: int = 0
    grad_clip: float | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.lr <= 0 or self.entropy < 0 or not 0.0 <= self.clip_weight <= 1.0:
            raise ValueError("need lr > 0, entropy >= 0 and 0 <= clip_weight <= 1")
        if self.epochs < 0 or self.n_samples < 0 or self.n_explore < 0:
            raise ValueError("epochs, n_samples and n_explore must be non-negative")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    buffer_weight: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    buffer_total: list[int] = field(default_factory=list)


def objective_gradient(
    policy: Policy,
    theta: np.ndarray,
    bb: BufferBatch,
    buffer: ExperienceBuffer,
    config: TrainConfig,
    reward: str | RewardFn = "underspecified",
    rewards: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    if config.objective == "iml":
        return iml_gradient(policy, theta, bb), {}
    if config.objective == "mml":
        return mml_gradient(policy, theta, bb), {}
    if config.objective == "raml":
        r = np.ones(len(bb)) if rewards is None else rewards
        return raml_gradient(policy, theta, bb, r, config.raml_temperature), {}
    return mapo_gradient(
        policy, theta, bb, buffer, rewards, reward, config.entropy, config.clip_weight, config.n_samples, rng
    )


def train_policy(
    policy: Policy,
    contexts: Sequence[Context],
    buffer: ExperienceBuffer,
    config: TrainConfig,
    rng: np.random.Generator,
    reward: str | RewardFn = "underspecified",
    theta: np.ndarray | None = None,
    rewards_fn: Callable[[BufferBatch], np.ndarray] | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, TrainLog]:
    """Adam ascent on the configured objective.

    ``buffer`` is updated in place when ``config.n_explore > 0``.
    ``rewards_fn`` maps the current buffer batch to per-trajectory rewards
    (used for auxiliary rewards); by default every buffered reward is 1.
    """
    contexts = list(contexts)
    theta = policy.init_params() if theta is None else np.array(theta, dtype=float)
    state = AdamState.zeros(policy.dim)
    log = TrainLog()
    bb, version, rewards = None, -1, None
    for epoch in range(config.epochs):
        if config.n_explore > 0:
            collect_explore(policy, theta, buffer, contexts, reward, config.n_explore, rng)
        if buffer.version != version or bb is None:
            bb, version = BufferBatch.build(policy, contexts, buffer), buffer.version
            rewards = rewards_fn(bb) if rewards_fn is not None else None
        grad, info = objective_gradient(policy, theta, bb, buffer, config, reward, rewards, rng)
        theta, state = adam_step(theta, grad, state, config.lr, config.betas, config.eps, config.grad_clip)
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"non-finite policy parameters at epoch {epoch}")
        if "buffer_weight" in info and len(info["buffer_weight"]):
            log.buffer_weight.append(float(np.mean(info["buffer_weight"])))
        log.grad_norm.append(float(np.linalg.norm(grad)))
        log.buffer_total.append(buffer.total())
        if callback is not None:
            callback(epoch, theta)
    return theta, log


# -- buffer preparation and diagnostics ---------------------------------------------


def mapox_prepare(
    policy: Policy,
    contexts: Sequence[Context],
    rng: np.random.Generator,
    reward: str | RewardFn = "underspecified",
    search_budget: int = 10000,
    config: TrainConfig | None = None,
) -> tuple[ExperienceBuffer, np.ndarray]:
    """Seed buffers by random search, then grow them with an exploring IML run.

    The returned buffer is the union of the random-search successes and
    every success found while IML trains, capped per context.
    """
    buffer = random_search(contexts, search_budget, rng, reward)
    config = config or TrainConfig(objective="iml", n_explore=4)
    if config.objective != "iml":
        raise ValueError("mapox_prepare runs IML")
    theta, _ = train_policy(policy, contexts, buffer, config, rng, reward)
    return buffer, theta


def buffer_diversity_curve(buffer: ExperienceBuffer, contexts: Sequence[Context], ks: Iterable[int] | None = None) -> dict[int, float]:
    """Fraction of contexts holding at least ``k`` buffered trajectories."""
    ks = range(1, buffer.cap + 1) if ks is None else ks
    sizes = np.array([buffer.size(c.id) for c in contexts])
    n = max(len(sizes), 1)
    return {int(k): float((sizes >= k).sum() / n) for k in ks}

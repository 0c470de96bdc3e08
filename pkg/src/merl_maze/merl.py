"""Meta-learning the auxiliary reward through a one-step lookahead.

The policy trains on the buffer with auxiliary rewards ``R_phi``.  After a
virtual gradient step ``theta' = theta + alpha * grad_theta O_train`` the
validation objective (plain underspecified reward) is differentiated with
respect to ``phi`` through ``theta'``::

    d theta' / d phi = alpha * sum_a pi(a) * score(a) (x) dR_phi(a)/dphi
    grad_phi O_val   = (d theta' / d phi)^T grad O_val(theta')

Both objectives are maximised.  The rewards enter the training objective
linearly, so the product of scores and reward derivatives is exact.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import Context
from .features import FEATURE_DIM, PARAM_DIM, AuxRewardParams, expand_jacobian, expand_weights, feature_matrix
from .objectives import AdamState, BufferBatch, ExperienceBuffer, adam_step, collect_explore, group_softmax
from .policy import Policy


class NonFiniteError(FloatingPointError):
    """Raised when a meta-training step produces NaN or inf."""


@dataclass
class MerlConfig:
    epochs: int = 300
    inner_lr: float = 0.05
    meta_lr: float = 0.1
    meta_clip: float = 1e-2
    entropy: float = 0.0
    n_explore: int = 0
    mode: str = "softmax"

    def __post_init__(self):
        if self.inner_lr < 0 or self.meta_lr < 0:
            raise ValueError("learning rates must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


class AuxBuffer:
    """A :class:`BufferBatch` plus its count features, for fast ``R_phi``."""

    def __init__(self, policy: Policy, contexts: Sequence[Context], buffer: ExperienceBuffer):
        self.bb = BufferBatch.build(policy, contexts, buffer)
        rows = [feature_matrix(self.bb.contexts[g].instruction, [t]) for g, t in zip(self.bb.group, self.bb.trajectories)]
        self.feats = np.concatenate(rows) if rows else np.zeros((0, FEATURE_DIM))

    @property
    def n_groups(self) -> int:
        return len(self.bb.contexts)

    def rewards(self, phi: AuxRewardParams) -> np.ndarray:
        s = self.feats @ expand_weights(phi)
        if phi.mode == "linear":
            return s
        return group_softmax(s, self.bb.group, self.n_groups)

    def reward_grads(self, phi: AuxRewardParams) -> np.ndarray:
        """``(m, 18)`` derivatives of every buffered reward."""
        g = self.feats @ expand_jacobian(phi)
        if phi.mode == "linear":
            return g
        p = self.rewards(phi)
        mean = np.zeros((self.n_groups, g.shape[1]))
        np.add.at(mean, self.bb.group, p[:, None] * g)
        return p[:, None] * (g - mean[self.bb.group])


def train_objective_grad(
    policy: Policy, theta: np.ndarray, aux: AuxBuffer, phi: AuxRewardParams, entropy: float = 0.0
) -> np.ndarray:
    """Exact gradient of ``sum_x sum_{a in B(x)} pi(a) R_phi(a) + entropy * H_B``.

    ``H_B = -sum_{a in B} pi(a) log pi(a)`` is the entropy restricted to the
    buffer, folded into the per-trajectory weight
    ``pi(a) * (R_phi(a) - entropy * (log pi(a) + 1))``.
    """
    if len(aux.bb) == 0:
        return np.zeros(policy.dim)
    lp = policy.log_probs(theta, aux.bb.steps)
    weights = np.exp(lp) * (aux.rewards(phi) - entropy * (lp + 1.0))
    return policy.weighted_score(theta, aux.bb.steps, weights)


def val_objective(policy: Policy, theta: np.ndarray, val: BufferBatch) -> tuple[float, np.ndarray]:
    """Buffered probability mass on validation contexts, and its gradient.

    Every buffered validation trajectory has underspecified reward 1, so the
    objective ``sum_x sum_{a in B(x)} R(a) pi(a)`` is the buffered mass.
    """
    if len(val) == 0:
        return 0.0, np.zeros(policy.dim)
    pi = np.exp(policy.log_probs(theta, val.steps))
    return float(pi.sum()), policy.weighted_score(theta, val.steps, pi)


def lookahead(
    policy: Policy, theta: np.ndarray, aux: AuxBuffer, phi: AuxRewardParams, inner_lr: float, entropy: float = 0.0
) -> np.ndarray:
    """One ascent step on the training objective."""
    return theta + inner_lr * train_objective_grad(policy, theta, aux, phi, entropy)


def meta_gradient(
    policy: Policy,
    theta: np.ndarray,
    aux: AuxBuffer,
    val: BufferBatch,
    phi: AuxRewardParams,
    inner_lr: float,
    entropy: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns ``(grad_phi O_val(theta'), theta', O_val(theta'))``.

    The entropy term does not depend on ``phi``, so only the reward-weighted
    scores couple ``theta'`` to ``phi``.
    """
    theta_new = lookahead(policy, theta, aux, phi, inner_lr, entropy)
    value, g_val = val_objective(policy, theta_new, val)
    if len(aux.bb) == 0:
        return np.zeros(PARAM_DIM), theta_new, value
    pi = np.exp(policy.log_probs(theta, aux.bb.steps))
    proj = policy.score_dot(theta, aux.bb.steps, g_val)
    return inner_lr * ((pi * proj) @ aux.reward_grads(phi)), theta_new, value


@dataclass
class MerlLog:
    val_objective: list[float] = field(default_factory=list)
    meta_grad_norm: list[float] = field(default_factory=list)
    phi: list[list[float]] = field(default_factory=list)


def merl_train(
    policy: Policy,
    train: Sequence[Context],
    val: Sequence[Context],
    train_buffer: ExperienceBuffer,
    val_buffer: ExperienceBuffer,
    config: MerlConfig,
    rng: np.random.Generator,
    theta: np.ndarray | None = None,
    phi: AuxRewardParams | None = None,
    callback: Callable[[int, np.ndarray, AuxRewardParams, float, float], None] | None = None,
) -> tuple[np.ndarray, AuxRewardParams, MerlLog]:
    """Joint training of the policy and the auxiliary reward.

    Each epoch optionally explores into both buffers, takes the lookahead
    step ``theta'`` with the current ``phi``, updates ``phi`` by Adam ascent
    on the meta-gradient and then commits ``theta <- theta'``.  ``theta`` is
    the warm start, normally a policy trained on the underspecified reward.
    Buffers are modified in place by exploration.
    """
    theta = policy.init_params() if theta is None else np.array(theta, dtype=float)
    phi = phi or AuxRewardParams.zeros(config.mode)
    phi_vec = phi.to_vector()
    phi_state = AdamState.zeros(len(phi_vec))
    log = MerlLog()
    aux, vb, versions = None, None, (-1, -1)
    for epoch in range(config.epochs):
        if config.n_explore > 0:
            collect_explore(policy, theta, train_buffer, train, "underspecified", config.n_explore, rng)
            collect_explore(policy, theta, val_buffer, val, "underspecified", config.n_explore, rng)
        if versions != (train_buffer.version, val_buffer.version):
            aux = AuxBuffer(policy, train, train_buffer)
            vb = BufferBatch.build(policy, val, val_buffer)
            versions = (train_buffer.version, val_buffer.version)
        g_phi, theta_new, value = meta_gradient(policy, theta, aux, vb, phi, config.inner_lr, config.entropy)
        if not (np.all(np.isfinite(g_phi)) and np.all(np.isfinite(theta_new))):
            raise NonFiniteError(f"non-finite update at epoch {epoch}")
        if config.meta_lr > 0:
            phi_vec, phi_state = adam_step(phi_vec, g_phi, phi_state, config.meta_lr, clip_norm=config.meta_clip)
            phi = AuxRewardParams.from_vector(phi_vec, config.mode)
        theta = theta_new
        log.val_objective.append(value)
        log.meta_grad_norm.append(float(np.linalg.norm(g_phi)))
        log.phi.append(phi_vec.tolist())
        if callback is not None:
            callback(epoch, theta, phi, value, log.meta_grad_norm[-1])
    return theta, phi, log

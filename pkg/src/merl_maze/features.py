"""Count-comparison features and the tied-weight auxiliary reward.

A feature fires when a count in the instruction equals a count in the
trajectory:

* 16 singles ``[#word(x) == #action(a)]`` at index ``4*w + c``;
* 256 pairs ``[#(w, b)(x) == #(c, d)(a)]`` over overlapping bigrams, at
  index ``16 + 16*(4*w + b) + (4*c + d)``.

Words are indexed in the order of ``env.WORDS`` and actions by their fixed
integer encoding.  Only the 16 single weights are free; pair weights are
tied through two scalars::

    w[(w,b),(c,d)] = tie_para * w[w,c] * w[b,d] + tie_cross * w[w,d] * w[b,c]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import ACTION_NAMES, N_ACTIONS, WORD_INDEX, WORDS

N_SINGLE = 16
N_PAIR = 256
FEATURE_DIM = N_SINGLE + N_PAIR
PARAM_DIM = 18
MODES = ("linear", "softmax")

PARAM_NAMES = tuple(
    [f"w_{w}_{ACTION_NAMES[c]}" for w in WORDS for c in range(N_ACTIONS)] + ["tie_para", "tie_cross"]
)


@dataclass
class AuxRewardParams:
    w_single: np.ndarray
    tie_para: float = 0.0
    tie_cross: float = 0.0
    mode: str = "softmax"

    def __post_init__(self):
        self.w_single = np.asarray(self.w_single, dtype=float).reshape(N_SINGLE)
        if not (np.all(np.isfinite(self.w_single)) and np.isfinite(self.tie_para) and np.isfinite(self.tie_cross)):
            raise ValueError("auxiliary reward parameters must be finite")
        if self.mode not in MODES:
            raise ValueError(f"unknown reward mode {self.mode!r}")

    @classmethod
    def zeros(cls, mode: str = "softmax") -> "AuxRewardParams":
        return cls(np.zeros(N_SINGLE), 0.0, 0.0, mode)

    @classmethod
    def from_vector(cls, v: Sequence[float], mode: str = "softmax") -> "AuxRewardParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:N_SINGLE].copy(), float(v[16]), float(v[17]), mode)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w_single, [self.tie_para, self.tie_cross]])

    def to_dict(self) -> dict:
        d = dict(zip(PARAM_NAMES, (float(x) for x in self.to_vector())))
        d["mode"] = self.mode
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuxRewardParams":
        return cls.from_vector([d[k] for k in PARAM_NAMES], d.get("mode", "softmax"))


def _as_vector(phi) -> np.ndarray:
    return phi.to_vector() if isinstance(phi, AuxRewardParams) else np.asarray(phi, dtype=float)


def _word_counts(x: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    ids = [WORD_INDEX[w] for w in x]
    single = np.bincount(ids, minlength=4) if ids else np.zeros(4, dtype=int)
    pair = np.zeros(16, dtype=int)
    for i, j in zip(ids, ids[1:]):
        pair[4 * i + j] += 1
    return single, pair


def _action_counts(a: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    ids = [int(c) for c in a]
    single = np.bincount(ids, minlength=4) if ids else np.zeros(4, dtype=int)
    pair = np.zeros(16, dtype=int)
    for i, j in zip(ids, ids[1:]):
        pair[4 * i + j] += 1
    return single, pair


def extract_features(x: Sequence[str], a: Sequence[int]) -> np.ndarray:
    xs, xp = _word_counts(x)
    as_, ap = _action_counts(a)
    singles = (xs[:, None] == as_[None, :]).astype(float).ravel()
    pairs = (xp[:, None] == ap[None, :]).astype(float).ravel()
    return np.concatenate([singles, pairs])


def feature_matrix(x: Sequence[str], candidates: Sequence[Sequence[int]]) -> np.ndarray:
    if not candidates:
        return np.zeros((0, FEATURE_DIM))
    return np.stack([extract_features(x, a) for a in candidates])


# (pair index) -> indices into w_single for the two tied products
_PAIR_AC = np.zeros(N_PAIR, dtype=int)
_PAIR_BD = np.zeros(N_PAIR, dtype=int)
_PAIR_AD = np.zeros(N_PAIR, dtype=int)
_PAIR_BC = np.zeros(N_PAIR, dtype=int)
for _w in range(4):
    for _b in range(4):
        for _c in range(4):
            for _d in range(4):
                _k = 16 * (4 * _w + _b) + 4 * _c + _d
                _PAIR_AC[_k] = 4 * _w + _c
                _PAIR_BD[_k] = 4 * _b + _d
                _PAIR_AD[_k] = 4 * _w + _d
                _PAIR_BC[_k] = 4 * _b + _c


def expand_weights(phi) -> np.ndarray:
    v = _as_vector(phi)
    w = v[:N_SINGLE]
    pairs = v[16] * w[_PAIR_AC] * w[_PAIR_BD] + v[17] * w[_PAIR_AD] * w[_PAIR_BC]
    return np.concatenate([w, pairs])


def expand_jacobian(phi) -> np.ndarray:
    """``d expand_weights / d phi``, shape ``(272, 18)``."""
    v = _as_vector(phi)
    w, tp, tc = v[:N_SINGLE], v[16], v[17]
    jac = np.zeros((FEATURE_DIM, PARAM_DIM))
    jac[np.arange(N_SINGLE), np.arange(N_SINGLE)] = 1.0
    rows = N_SINGLE + np.arange(N_PAIR)
    # np.add.at because w_ac and w_bd coincide on the diagonal
    np.add.at(jac, (rows, _PAIR_AC), tp * w[_PAIR_BD])
    np.add.at(jac, (rows, _PAIR_BD), tp * w[_PAIR_AC])
    np.add.at(jac, (rows, _PAIR_AD), tc * w[_PAIR_BC])
    np.add.at(jac, (rows, _PAIR_BC), tc * w[_PAIR_AD])
    jac[rows, 16] = w[_PAIR_AC] * w[_PAIR_BD]
    jac[rows, 17] = w[_PAIR_AD] * w[_PAIR_BC]
    return jac


def linear_scores(phi, feats: np.ndarray) -> np.ndarray:
    return feats @ expand_weights(phi)


def rewards_from_features(phi, feats: np.ndarray, rewards: np.ndarray, mode: str | None = None) -> np.ndarray:
    """Auxiliary rewards for one context's candidates.

    Softmax mode normalises the linear scores over the successful
    candidates, so failures keep reward 0 and a lone success gets exactly 1.
    """
    mode = mode or getattr(phi, "mode", "softmax")
    rewards = np.asarray(rewards, dtype=float)
    s = linear_scores(phi, feats)
    if mode == "linear":
        return s * rewards
    out = np.zeros(len(rewards))
    ok = rewards > 0
    if ok.any():
        z = s[ok] - s[ok].max()
        e = np.exp(z)
        out[ok] = e / e.sum() * rewards[ok]
    return out


def reward_grad_from_features(phi, feats: np.ndarray, rewards: np.ndarray, mode: str | None = None) -> np.ndarray:
    """``d reward_i / d phi``, shape ``(m, 18)``."""
    mode = mode or getattr(phi, "mode", "softmax")
    rewards = np.asarray(rewards, dtype=float)
    g = feats @ expand_jacobian(phi)
    if mode == "linear":
        return g * rewards[:, None]
    out = np.zeros_like(g)
    ok = rewards > 0
    if ok.any():
        s = linear_scores(phi, feats[ok])
        p = np.exp(s - s.max())
        p /= p.sum()
        gk = g[ok]
        out[ok] = p[:, None] * (gk - p @ gk) * rewards[ok][:, None]
    return out


def aux_reward(phi, ctx, candidates: Sequence[Sequence[int]], rewards, mode: str | None = None) -> np.ndarray:
    if len(candidates) == 0:
        raise ValueError("aux_reward needs at least one candidate")
    return rewards_from_features(phi, feature_matrix(ctx.instruction, candidates), rewards, mode)


def aux_reward_grad(phi, ctx, candidates: Sequence[Sequence[int]], rewards, mode: str | None = None) -> np.ndarray:
    if len(candidates) == 0:
        raise ValueError("aux_reward_grad needs at least one candidate")
    return reward_grad_from_features(phi, feature_matrix(ctx.instruction, candidates), rewards, mode)

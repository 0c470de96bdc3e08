"""Versioned JSON checkpoints for policy and reward parameters."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import PARAM_NAMES, AuxRewardParams
from .objectives import AdamState
from .policy import Policy

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    policy: Policy
    theta: np.ndarray
    phi: AuxRewardParams | None = None
    adam: AdamState | None = None
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "version": FORMAT_VERSION,
            "policy": self.policy.to_dict(),
            "theta": self.theta.tolist(),
            "epoch": self.epoch,
            "meta": self.meta,
        }
        if self.phi is not None:
            d["phi"] = self.phi.to_dict()
        if self.adam is not None:
            d["adam"] = {"m": self.adam.m.tolist(), "v": self.adam.v.tolist(), "t": self.adam.t}
        if self.rng_state is not None:
            d["rng_state"] = self.rng_state
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        policy = Policy(**d["policy"])
        theta = np.asarray(d["theta"], dtype=float)
        if theta.shape != (policy.dim,):
            raise ValueError(f"theta has {theta.size} entries, policy expects {policy.dim}")
        phi = AuxRewardParams.from_dict(d["phi"]) if "phi" in d else None
        adam = None
        if "adam" in d:
            a = d["adam"]
            adam = AdamState(np.asarray(a["m"], float), np.asarray(a["v"], float), int(a["t"]))
        return cls(policy, theta, phi, adam, int(d.get("epoch", 0)), d.get("rng_state"), d.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(ckpt.to_dict()))


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_dict(json.loads(Path(path).read_text()))


def phi_names() -> tuple[str, ...]:
    return PARAM_NAMES

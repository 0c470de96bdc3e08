"""Experiment orchestration: fixed buffers, multi-seed sweeps, rerankers, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .borl import BorlConfig, borl_run
from .env import Context, Dataset, oracle_reward, spurious_candidates, underspecified_reward
from .features import AuxRewardParams, expand_weights, feature_matrix
from .merl import MerlConfig, merl_train
from .objectives import ExperienceBuffer, TrainConfig, buffer_diversity_curve, train_policy
from .policy import Policy

SETTINGS = ("oracle", "underspecified", "merl", "borl")
SPLIT_CODES = {"train": 0, "val": 1}

# Desk fixture policy: base features at 0.1 plus the positional block.
FIXTURE_POLICY = {"base_scale": 0.1, "positional": True, "max_len": 16}


def build_fixed_buffers(
    dataset: Dataset, setting: str, n_spurious: int, seed: int
) -> tuple[ExperienceBuffer, ExperienceBuffer]:
    """Train and validation buffers for one setting.

    The oracle setting buffers only gold trajectories; every other setting
    adds up to ``n_spurious`` spurious successes per context, drawn with a
    seed derived from ``(seed, split, context index)``.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    out = []
    for split, contexts in (("train", dataset.train), ("val", dataset.val)):
        buf = ExperienceBuffer()
        for i, ctx in enumerate(contexts):
            buf.add(ctx.id, ctx.gold)
            if setting != "oracle":
                for traj in spurious_candidates(ctx, n_spurious, np.random.default_rng([seed, SPLIT_CODES[split], i])):
                    buf.add(ctx.id, traj)
        out.append(buf)
    return out[0], out[1]


def evaluate(policy: Policy, theta: np.ndarray, contexts: Sequence[Context]) -> float:
    """Fraction of contexts where greedy decoding reaches the goal."""
    if not contexts:
        return 0.0
    return float(np.mean([underspecified_reward(c, policy.greedy_decode(theta, c)) for c in contexts]))


@dataclass
class ExperimentSpec:
    settings: tuple[str, ...] = SETTINGS
    n_seeds: int = 5
    n_spurious: int = 4
    policy: dict = field(default_factory=lambda: dict(FIXTURE_POLICY))
    train: TrainConfig = field(default_factory=TrainConfig)
    merl: MerlConfig = field(default_factory=lambda: MerlConfig(inner_lr=3.0, meta_lr=0.1, entropy=2e-4, n_explore=0))
    borl: BorlConfig = field(default_factory=BorlConfig)

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        self.settings = tuple(self.settings)
        for s in self.settings:
            if s not in SETTINGS:
                raise ValueError(f"unknown setting {s!r}")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.merl, dict):
            self.merl = MerlConfig(**self.merl)
        if isinstance(self.borl, dict):
            self.borl = BorlConfig(**self.borl)

    def make_policy(self) -> Policy:
        return Policy(**self.policy)

    def to_dict(self) -> dict:
        return {
            "settings": list(self.settings),
            "n_seeds": self.n_seeds,
            "n_spurious": self.n_spurious,
            "policy": dict(self.policy),
            "train": self.train.to_dict(),
            "merl": self.merl.to_dict(),
            "borl": self.borl.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        base = cls().to_dict()
        for k, v in d.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                merged = {**base[k], **v}
                if k == "borl" and isinstance(v.get("train"), dict):
                    merged["train"] = {**base["borl"]["train"], **v["train"]}
                base[k] = merged
            else:
                base[k] = v
        return cls(**base)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


@dataclass
class ResultRow:
    setting: str
    train: list[float]
    dev: list[float]
    test: list[float]
    incomplete: bool = False
    errors: list[str] = field(default_factory=list)

    @staticmethod
    def _stat(xs: list[float]) -> tuple[float, float]:
        if not xs:
            return float("nan"), float("nan")
        return float(np.mean(xs)), float(np.std(xs))

    @property
    def train_mean(self) -> float:
        return self._stat(self.train)[0]

    @property
    def dev_mean(self) -> float:
        return self._stat(self.dev)[0]

    @property
    def dev_std(self) -> float:
        return self._stat(self.dev)[1]

    @property
    def test_mean(self) -> float:
        return self._stat(self.test)[0]

    @property
    def test_std(self) -> float:
        return self._stat(self.test)[1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**d)


@dataclass
class RunArtifacts:
    """Trained parameters of a sweep, keyed by ``(setting, seed)``."""

    theta: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    phi: dict[tuple[str, int], AuxRewardParams] = field(default_factory=dict)
    logs: dict[tuple[str, int], dict] = field(default_factory=dict)


def _setting_rng(setting: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, SETTINGS.index(setting)])


def train_setting(
    spec: ExperimentSpec,
    dataset: Dataset,
    setting: str,
    seed: int,
    warm_start: np.ndarray | None = None,
) -> tuple[np.ndarray, AuxRewardParams | None, dict]:
    """Train one setting for one seed on the train/val splits only."""
    policy = spec.make_policy()
    train, val = list(dataset.train), list(dataset.val)
    rng = _setting_rng(setting, seed)
    kind = "oracle" if setting == "oracle" else "underspecified"
    tb, vb = build_fixed_buffers(Dataset(train, val, [], dataset.seed, dataset.gen_params), kind, spec.n_spurious, seed)
    if setting in ("oracle", "underspecified"):
        reward = oracle_reward if setting == "oracle" else underspecified_reward
        theta, log = train_policy(policy, train, tb, spec.train, rng, reward)
        return theta, None, {"buffer_total": tb.total()}
    if setting == "merl":
        if warm_start is None:
            warm_start, _, _ = train_setting(spec, dataset, "underspecified", seed)
        theta, phi, log = merl_train(policy, train, val, tb, vb, spec.merl, rng, theta=warm_start)
        return theta, phi, {"val_objective": log.val_objective[-1] if log.val_objective else 0.0}
    result = borl_run(policy, train, val, tb, spec.borl, seed)
    return result.best_theta, result.best_phi, {"trials": [asdict(t) for t in result.trials]}


def run_experiment(
    spec: ExperimentSpec,
    dataset: Dataset,
    log: Callable[[str], None] | None = None,
) -> tuple[list[ResultRow], RunArtifacts]:
    """Run every setting for seeds ``0..n_seeds-1``.

    MeRL warm-starts from the underspecified policy of the same seed.  Test
    contexts are used only for the final evaluation.
    """
    policy = spec.make_policy()
    rows = {s: ResultRow(s, [], [], []) for s in spec.settings}
    art = RunArtifacts()
    order = sorted(spec.settings, key=SETTINGS.index)
    for seed in range(spec.n_seeds):
        for setting in order:
            t0 = time.time()
            try:
                warm = art.theta.get(("underspecified", seed)) if setting == "merl" else None
                theta, phi, info = train_setting(spec, dataset, setting, seed, warm)
            except Exception as exc:  # surfaced in the row, the sweep goes on
                rows[setting].incomplete = True
                rows[setting].errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                continue
            art.theta[(setting, seed)] = theta
            if phi is not None:
                art.phi[(setting, seed)] = phi
            art.logs[(setting, seed)] = info
            row = rows[setting]
            row.train.append(evaluate(policy, theta, dataset.train))
            row.dev.append(evaluate(policy, theta, dataset.val))
            row.test.append(evaluate(policy, theta, dataset.test))
            if log:
                log(f"seed {seed} {setting:<15} train {row.train[-1]:.3f} dev {row.dev[-1]:.3f} "
                    f"test {row.test[-1]:.3f} ({time.time() - t0:.1f}s)")
    return [rows[s] for s in order], art


# -- reranking baselines ------------------------------------------------------------

RERANK_VARIANTS = ("features_only", "features_plus_logprob")


@dataclass
class RerankResult:
    variant: str
    weights: list[float]
    logprob_weight: float
    val_accuracy: float
    test_accuracy: float


def _rerank_pool(policy, theta, contexts, n_samples, rng):
    pools = policy.sample_batch(theta, contexts, n_samples, rng)
    out = []
    for ctx, trajs in zip(contexts, pools):
        trajs = [t for t in trajs if t] or [(0,)]
        feats = feature_matrix(ctx.instruction, trajs)
        logp = policy.log_probs(theta, policy.batch([(ctx, t) for t in trajs]))
        ok = np.array([underspecified_reward(ctx, t) for t in trajs], dtype=float)
        out.append((feats, logp, ok))
    return out


def _rerank_accuracy(pool, w272: np.ndarray, lam: float) -> float:
    hits = [ok[int(np.argmax(feats @ w272 + lam * logp))] for feats, logp, ok in pool]
    return float(np.mean(hits)) if hits else 0.0


def rerank_baseline(
    policy: Policy,
    theta: np.ndarray,
    dataset: Dataset,
    variant: str,
    n_samples: int = 8,
    seed: int = 0,
    budget: int = 200,
    box: tuple[float, float] = (-1.0, 1.0),
) -> RerankResult:
    """Fit a linear reranker of sampled trajectories on validation reward.

    The scorer uses the tied count-feature weights; the second variant adds
    ``lam * log pi(a)``.  Weights are picked by seeded random search (the
    all-zero scorer, with ``lam = 1`` for the second variant, is always
    among the candidates).  Ties go to the earliest sample.
    """
    if variant not in RERANK_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng([seed, 7])
    val_pool = _rerank_pool(policy, theta, dataset.val, n_samples, rng)
    use_lp = variant == "features_plus_logprob"
    cands = [(np.zeros(18), 1.0 if use_lp else 0.0)]
    for _ in range(budget):
        cands.append((rng.uniform(*box, size=18), float(rng.uniform(0.0, 1.0)) if use_lp else 0.0))
    best, best_acc = cands[0], -1.0
    for v, lam in cands:
        acc = _rerank_accuracy(val_pool, expand_weights(AuxRewardParams.from_vector(v, "linear")), lam)
        if acc > best_acc:
            best, best_acc = (v, lam), acc
    test_pool = _rerank_pool(policy, theta, dataset.test, n_samples, rng)
    w = expand_weights(AuxRewardParams.from_vector(best[0], "linear"))
    return RerankResult(variant, best[0].tolist(), best[1], best_acc, _rerank_accuracy(test_pool, w, best[1]))


# -- reports ---------------------------------------------------------------------

CSV_FIELDS = ("setting", "train_mean", "dev_mean", "dev_std", "test_mean", "test_std", "n_seeds", "incomplete",
              "test_per_seed")


def results_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([r.setting, f"{r.train_mean:.4f}", f"{r.dev_mean:.4f}", f"{r.dev_std:.4f}", f"{r.test_mean:.4f}",
                    f"{r.test_std:.4f}", len(r.test), int(r.incomplete), ";".join(f"{x:.4f}" for x in r.test)])
    return buf.getvalue()


def results_table(rows: Sequence[ResultRow], config_hash: str = "") -> str:
    lines = [f"config {config_hash}" if config_hash else "", f"{'setting':<16}{'dev':>16}{'test':>16}"]
    for r in rows:
        flag = "  (incomplete)" if r.incomplete else ""
        lines.append(f"{r.setting:<16}{100 * r.dev_mean:>9.1f} ± {100 * r.dev_std:<4.1f}"
                     f"{100 * r.test_mean:>9.1f} ± {100 * r.test_std:<4.1f}{flag}")
    return "\n".join(l for l in lines if l) + "\n"


def load_results(path) -> list[ResultRow]:
    d = json.loads(Path(path).read_text())
    return [ResultRow.from_dict(r) for r in d["rows"]]


def plot_results(rows: Sequence[ResultRow], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r.dev_mean for r in rows], 0.4, yerr=[r.dev_std for r in rows], label="dev", capsize=3)
    ax.bar(x + 0.2, [r.test_mean for r in rows], 0.4, yerr=[r.test_std for r in rows], label="test", capsize=3)
    ax.set_xticks(x, [r.setting for r in rows])
    ax.set_ylabel("greedy accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_diversity(curves: dict[str, dict[int, float]], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for name, curve in curves.items():
        ks = sorted(curve)
        ax.plot(ks, [curve[k] for k in ks], marker="o", label=name)
    ax.set_xlabel("k")
    ax.set_ylabel("fraction of contexts with |B| >= k")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def report(rows: Sequence[ResultRow], out_dir, spec: ExperimentSpec | None = None, figures: bool = True) -> dict:
    """Write results.csv, results.json, summary.txt and (optionally) results.png."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = spec.config_hash() if spec else ""
    paths = {"csv": out / "results.csv", "json": out / "results.json", "summary": out / "summary.txt"}
    paths["csv"].write_text(results_csv(rows))
    paths["json"].write_text(json.dumps(
        {"config_hash": h, "config": spec.to_dict() if spec else None, "rows": [r.to_dict() for r in rows]},
        indent=1, sort_keys=True))
    paths["summary"].write_text(results_table(rows, h))
    if figures and rows:
        paths["figure"] = out / "results.png"
        plot_results(rows, paths["figure"])
    return paths


def diversity_csv(curve: dict[int, float]) -> str:
    return "k,fraction\n" + "".join(f"{k},{v:.4f}\n" for k, v in sorted(curve.items()))


def analyze_buffers(buffers: dict[str, ExperienceBuffer], contexts: Sequence[Context], out_dir, figures: bool = True) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = {name: buffer_diversity_curve(b, contexts) for name, b in buffers.items()}
    paths = {}
    for name, curve in curves.items():
        paths[name] = out / f"diversity_{name}.csv"
        paths[name].write_text(diversity_csv(curve))
    if figures:
        paths["figure"] = out / "buffer_diversity.png"
        plot_diversity(curves, paths["figure"])
    return paths

"""Reward search by Gaussian-process bandits.

Each trial proposes auxiliary-reward weights ``phi`` by expected
improvement, keeps only the top-scoring buffered trajectories of every
training context, trains a fresh policy on the plain underspecified reward
and scores it by greedy validation accuracy.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from .env import Context, underspecified_reward
from .features import PARAM_DIM, AuxRewardParams, feature_matrix, linear_scores
from .objectives import ExperienceBuffer, TrainConfig, Trajectory, train_policy
from .policy import Policy

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
NOISE_FLOOR = 1e-10
SQRT5 = math.sqrt(5.0)


class GpFitError(np.linalg.LinAlgError):
    """Kernel matrix not positive definite even with the largest jitter."""


def matern52(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray, signal: float) -> np.ndarray:
    """Matérn 5/2 kernel with per-dimension lengthscales."""
    d = (a[:, None, :] - b[None, :, :]) / lengthscales
    r = np.sqrt(np.maximum((d * d).sum(-1), 0.0))
    return signal * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


@dataclass
class GpSurrogate:
    X: np.ndarray
    y: np.ndarray
    lengthscales: np.ndarray
    signal: float
    noise: float
    mean: float = 0.0
    jitter: float = 0.0
    _chol: tuple | None = field(default=None, repr=False)
    _alpha: np.ndarray | None = field(default=None, repr=False)

    def factorize(self) -> "GpSurrogate":
        if len(self.X) == 0:
            self._chol, self._alpha = None, np.zeros(0)
            return self
        K = matern52(self.X, self.X, self.lengthscales, self.signal)
        K[np.diag_indices_from(K)] += self.noise
        for jit in JITTERS:
            try:
                Kj = K.copy()
                Kj[np.diag_indices_from(Kj)] += jit
                self._chol = cho_factor(Kj, lower=True)
                self.jitter = jit
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise GpFitError("kernel matrix is not positive definite")
        self._alpha = cho_solve(self._chol, self.y - self.mean)
        return self

    def log_marginal_likelihood(self) -> float:
        if self._chol is None:
            return 0.0
        L = self._chol[0]
        r = self.y - self.mean
        return float(-0.5 * r @ self._alpha - np.log(np.diag(L)).sum() - 0.5 * len(r) * math.log(2 * math.pi))

    def relevance(self) -> np.ndarray:
        """Inverse lengthscales; large means the dimension matters."""
        return 1.0 / self.lengthscales

    def with_data(self, X: np.ndarray, y: np.ndarray) -> "GpSurrogate":
        return GpSurrogate(np.asarray(X, float), np.asarray(y, float), self.lengthscales, self.signal,
                           self.noise, self.mean).factorize()


def gp_posterior(model: GpSurrogate, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one point ``(d,)`` or many ``(m, d)``."""
    P = np.atleast_2d(np.asarray(phi, dtype=float))
    prior = np.full(len(P), model.signal)
    if len(model.X) == 0:
        mu, var = np.full(len(P), model.mean), prior
    else:
        Ks = matern52(P, model.X, model.lengthscales, model.signal)
        mu = model.mean + Ks @ model._alpha
        v = cho_solve(model._chol, Ks.T)
        var = np.maximum(prior - (Ks * v.T).sum(1), 0.0)
    if np.ndim(phi) == 1:
        return mu[0], var[0]
    return mu, var


def _unpack(h: np.ndarray, d: int) -> tuple[np.ndarray, float, float]:
    return np.exp(h[:d]), float(np.exp(h[d])), float(np.exp(h[d + 1]))


def gp_fit(
    X: np.ndarray,
    y: np.ndarray,
    seed: int = 0,
    n_random: int = 256,
    sweeps: int = 2,
    noise: float | None = None,
) -> GpSurrogate:
    """Fit kernel hyperparameters by maximising the log marginal likelihood.

    Log-lengthscales, log signal variance and log noise variance are drawn
    at random ``n_random`` times within fixed bounds, then the best draw is
    refined coordinate by coordinate.  Passing ``noise`` pins the noise
    variance (use a tiny value for interpolation).  The prior mean is the
    sample mean of ``y``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    mean = float(y.mean()) if n else 0.0
    scale = float(max(y.var(), 1e-4)) if n else 1.0
    lo = np.concatenate([np.full(d, math.log(0.05)), [math.log(scale * 1e-2), math.log(NOISE_FLOOR)]])
    hi = np.concatenate([np.full(d, math.log(20.0)), [math.log(scale * 1e2), math.log(scale)]])
    if noise is not None:
        lo[d + 1] = hi[d + 1] = math.log(max(noise, NOISE_FLOOR))
    rng = np.random.default_rng(seed)

    def score(h):
        ls, sig, nz = _unpack(h, d)
        try:
            return GpSurrogate(X, y, ls, sig, nz, mean).factorize().log_marginal_likelihood()
        except GpFitError:
            return -np.inf

    if n == 0:
        h = (lo + hi) / 2
        ls, sig, nz = _unpack(h, d)
        return GpSurrogate(X, y, ls, sig, nz, mean).factorize()
    draws = lo + (hi - lo) * rng.random((n_random, d + 2))
    scores = np.array([score(h) for h in draws])
    best = draws[int(np.argmax(scores))].copy()
    best_score = float(scores.max())
    for _ in range(sweeps):
        for i in range(d + 2):
            if lo[i] == hi[i]:
                continue
            for step in (1.0, -1.0, 0.3, -0.3, 0.1, -0.1):
                h = best.copy()
                h[i] = np.clip(h[i] + step, lo[i], hi[i])
                s = score(h)
                if s > best_score:
                    best, best_score = h, s
    ls, sig, nz = _unpack(best, d)
    return GpSurrogate(X, y, ls, sig, nz, mean).factorize()


def expected_improvement(mu, sigma, best: float):
    """EI for maximisation; equals ``max(mu - best, 0)`` where ``sigma == 0``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    diff = mu - best
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0), 0.0)
        pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ei = np.where(sigma > 0, diff * ndtr(z) + sigma * pdf, np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def propose(
    model: GpSurrogate | None,
    box: tuple[float, float] | np.ndarray,
    restarts: int,
    rng: np.random.Generator,
    pending: Sequence[np.ndarray] = (),
    dim: int = PARAM_DIM,
    n_candidates: int = 2048,
) -> np.ndarray:
    """Maximise expected improvement inside ``box``.

    Pending proposals are treated as observed at their posterior mean, which
    shrinks the variance around them.  Without observations a uniform point
    is returned.
    """
    bounds = np.broadcast_to(np.asarray(box, dtype=float).reshape(-1, 2), (dim, 2)) if np.ndim(box) == 2 \
        else np.tile(np.asarray(box, dtype=float), (dim, 1))
    lo, hi = bounds[:, 0], bounds[:, 1]
    if model is None or len(model.X) == 0:
        return lo + (hi - lo) * rng.random(dim)
    best = float(model.y.max())
    if len(pending):
        P = np.atleast_2d(np.asarray(pending, dtype=float))
        mu_p, _ = gp_posterior(model, P)
        model = model.with_data(np.vstack([model.X, P]), np.concatenate([model.y, mu_p]))

    def acq(points):
        mu, var = gp_posterior(model, points)
        return expected_improvement(mu, np.sqrt(var), best)

    cand = lo + (hi - lo) * rng.random((n_candidates, dim))
    vals = acq(cand)
    starts = cand[np.argsort(-vals, kind="stable")[:max(restarts, 1)]]
    out, out_val = None, -np.inf
    for x in starts:
        x = x.copy()
        fx = float(acq(x[None])[0])
        step = 0.25 * (hi - lo)
        for _ in range(6):
            for i in range(dim):
                trial = np.repeat(x[None], 2, axis=0)
                trial[0, i] = min(x[i] + step[i], hi[i])
                trial[1, i] = max(x[i] - step[i], lo[i])
                tv = acq(trial)
                j = int(np.argmax(tv))
                if tv[j] > fx:
                    x, fx = trial[j], float(tv[j])
            step = step / 2
        if fx > out_val:
            out, out_val = x, fx
    return np.clip(out, lo, hi)


# -- buffer filtering ---------------------------------------------------------------


def trajectory_scores(phi, ctx: Context, trajectories: Sequence[Trajectory]) -> np.ndarray:
    return linear_scores(phi, feature_matrix(ctx.instruction, list(trajectories)))


def filter_buffer_by_reward(buffer: ExperienceBuffer, contexts: Sequence[Context], phi) -> ExperienceBuffer:
    """Keep, per context, every trajectory with the maximal linear score."""
    by_id = {c.id: c for c in contexts}

    def keep(ctx_id, trajs):
        if not trajs or ctx_id not in by_id:
            return trajs
        s = trajectory_scores(phi, by_id[ctx_id], trajs)
        top = s.max()
        return [t for t, v in zip(trajs, s) if np.isclose(v, top, rtol=0.0, atol=1e-12)]

    return buffer.filtered(keep)


def borl_trial_exploration_accept(candidate: Trajectory, buffered: Sequence[Trajectory], phi, ctx: Context) -> bool:
    """Accept a successful sample only if it outranks everything buffered."""
    if not buffered:
        return True
    s = trajectory_scores(phi, ctx, [candidate, *buffered])
    return bool(s[0] > s[1:].max())


# -- the search loop ------------------------------------------------------------------


@dataclass
class BorlConfig:
    trials: int = 60
    box: tuple[float, float] = (-1.0, 1.0)
    batch: int = 1
    restarts: int = 4
    n_explore: int = 0
    mode: str = "linear"
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("need at least one trial")
        if not all(map(math.isfinite, self.box)):
            raise ValueError("search box must be finite")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.box = tuple(self.box)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trial:
    k: int
    phi: list[float]
    value: float
    best_so_far: float
    error: str = ""


@dataclass
class BorlResult:
    best_phi: AuxRewardParams
    best_theta: np.ndarray
    trials: list[Trial]


def greedy_accuracy(policy: Policy, theta: np.ndarray, contexts: Sequence[Context]) -> float:
    if not contexts:
        return 0.0
    return float(np.mean([underspecified_reward(c, policy.greedy_decode(theta, c)) for c in contexts]))


def _train_trial(policy, train, buffer, phi, config: BorlConfig, rng, theta0=None):
    """MAPO on the filtered buffer; exploration only keeps outranking samples."""
    tc = TrainConfig(**{**config.train.to_dict(), "n_explore": 0})
    if config.n_explore <= 0:
        return train_policy(policy, train, buffer, tc, rng, theta=theta0)[0]
    theta = policy.init_params() if theta0 is None else np.array(theta0, dtype=float)
    by_id = {c.id: c for c in train}
    per_epoch = TrainConfig(**{**tc.to_dict(), "epochs": 1})
    for _ in range(tc.epochs):
        for ctx, trajs in zip(train, policy.sample_batch(theta, train, config.n_explore, np.random.default_rng(rng.integers(2**32)))):
            for t in trajs:
                if t and underspecified_reward(ctx, t) > 0 and not buffer.contains(ctx.id, t):
                    if borl_trial_exploration_accept(t, buffer.get(ctx.id), phi, by_id[ctx.id]):
                        buffer.add(ctx.id, t)
        theta, _ = train_policy(policy, train, buffer, per_epoch, rng, theta=theta)
    return theta


def borl_run(
    policy: Policy,
    train: Sequence[Context],
    val: Sequence[Context],
    base_buffer: ExperienceBuffer,
    config: BorlConfig,
    seed: int = 0,
    theta0: np.ndarray | None = None,
) -> BorlResult:
    """Run ``config.trials`` trials and return the best one by validation accuracy.

    Every trial starts from ``theta0`` (zeros when omitted).  A trial that
    fails numerically is logged with value 0 and the sweep continues.
    """
    rng = np.random.default_rng(seed)
    X, y, trials = [], [], []
    best_theta, best_phi, best_v = policy.init_params(), None, -np.inf
    model = None
    k = 0
    while k < config.trials:
        pending: list[np.ndarray] = []
        for _ in range(min(config.batch, config.trials - k)):
            pending.append(propose(model, config.box, config.restarts, rng, pending))
        for phi_vec in pending:
            k += 1
            phi = AuxRewardParams.from_vector(phi_vec, config.mode)
            err = ""
            try:
                buf = filter_buffer_by_reward(base_buffer, train, phi)
                theta = _train_trial(policy, train, buf, phi, config, rng, theta0)
                if not np.all(np.isfinite(theta)):
                    raise FloatingPointError("non-finite parameters")
                v = greedy_accuracy(policy, theta, val)
            except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                theta, v, err = None, 0.0, f"{type(exc).__name__}: {exc}"
            X.append(phi_vec)
            y.append(v)
            if v > best_v:
                best_v, best_phi, best_theta = v, phi, theta
            trials.append(Trial(k, [float(x) for x in phi_vec], v, best_v, err))
        model = gp_fit(np.array(X), np.array(y), seed=int(rng.integers(2**31)))
    return BorlResult(best_phi, best_theta, trials)

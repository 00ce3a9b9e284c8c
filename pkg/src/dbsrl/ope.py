"""Importance-sampling baseline, OPE ranking metrics and the rank-sum test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .replay import Trajectory
from .rewards import discounted_return


@dataclass
class PolicyEvalRecord:
    policy_id: str
    actual: float
    estimates: dict[str, float] = field(default_factory=dict)


class UniformBehavior:
    """Uniform amplitudes on [B, 1]; density 1 / (1 - B) on the support."""

    def __init__(self, B: float):
        if not 0.0 <= B < 1.0:
            raise ValueError(f"B must lie in [0, 1), got {B}")
        self.B = B

    def density(self, state, action: float) -> float:
        return 1.0 / (1.0 - self.B) if self.B <= action <= 1.0 else 0.0

    __call__ = density


class SmoothedTarget:
    """A deterministic policy widened to N(pi(s), sigma^2) truncated to [0, 1]."""

    def __init__(self, policy, sigma: float = 0.1):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.policy = policy
        self.sigma = sigma

    def _center(self, state) -> float:
        if hasattr(self.policy, "act"):
            return self.policy.act(state)
        return float(self.policy(state))

    def density(self, state, action: float) -> float:
        if not 0.0 <= action <= 1.0:
            return 0.0
        mu, sd = self._center(state), self.sigma
        mass = ndtr((1.0 - mu) / sd) - ndtr((0.0 - mu) / sd)
        z = (action - mu) / sd
        return math.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi) * mass)

    def densities(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mu = self.policy.act_batch(states) if hasattr(self.policy, "act_batch") else np.array([self._center(s) for s in states])
        sd = self.sigma
        mass = ndtr((1.0 - mu) / sd) - ndtr(-mu / sd)
        z = (actions - mu) / sd
        dens = np.exp(-0.5 * z * z) / (sd * math.sqrt(2.0 * math.pi) * mass)
        return np.where((actions >= 0.0) & (actions <= 1.0), dens, 0.0)

    __call__ = density


@dataclass
class ISResult:
    estimate: float
    weights: np.ndarray
    returns: np.ndarray
    unsupported: int


def _densities(fn, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    if hasattr(fn, "densities"):
        return fn.densities(states, actions)
    density = getattr(fn, "density", fn)
    return np.array([density(s, a) for s, a in zip(states, actions)], dtype=np.float64)


def trajectory_log_weight(traj: Trajectory, target, behavior) -> tuple[float, bool]:
    """Sum of log target/behavior density ratios; flags actions off the behavior support.

    Long sessions multiply hundreds of ratios, so weights are kept in log space.
    """
    states = traj.states[:-1]
    num = _densities(target, states, traj.actions)
    den = _densities(behavior, states, traj.actions)
    if np.any(den <= 0):
        return -math.inf, False
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(num) - np.log(den))), True


def trajectory_weight(traj: Trajectory, target, behavior) -> tuple[float, bool]:
    logw, ok = trajectory_log_weight(traj, target, behavior)
    return math.exp(logw), ok


def importance_sampling(
    trajectories: Sequence[Trajectory],
    target,
    behavior,
    gamma: float | None = None,
    self_normalized: bool = True,
    probabilities: Sequence[float] | None = None,
) -> ISResult:
    """Trajectory-wise importance-sampling estimate of the target's total return.

    ``probabilities`` weights each trajectory (e.g. its behavior-policy
    probability when the full trajectory space is enumerated); by default
    every trajectory counts once. ``unsupported`` counts trajectories whose
    actions fall outside the behavior support; they get weight 0.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    n = len(trajectories)
    p = np.full(n, 1.0 / n) if probabilities is None else np.asarray(probabilities, dtype=np.float64)
    if p.shape != (n,):
        raise ValueError("probabilities must have one entry per trajectory")
    logw = np.empty(n)
    returns = np.empty(n)
    unsupported = 0
    for i, traj in enumerate(trajectories):
        lw, ok = trajectory_log_weight(traj, target, behavior)
        unsupported += not ok
        logw[i] = lw
        g = traj.gamma if gamma is None else gamma
        returns[i] = discounted_return(traj.rewards, g, traj.r_end)
    with np.errstate(divide="ignore"):
        log_pw = logw + np.log(p)
    if self_normalized:
        top = log_pw.max()
        if not np.isfinite(top):
            return ISResult(float("nan"), np.zeros(n), returns, unsupported)
        norm_w = np.exp(log_pw - top)
        norm_w /= norm_w.sum()
        return ISResult(float(norm_w @ returns), norm_w, returns, unsupported)
    weights = np.exp(logw)
    return ISResult(float((p * weights) @ returns), weights, returns, unsupported)


# ---------------------------------------------------------------------------
# ranking metrics


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks; NaN when either side is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size != y.size or x.size < 2:
        raise ValueError("need two equally long samples of at least 2 values")
    rx, ry = rankdata(x), rankdata(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0.0:
        return float("nan")
    return float(dx @ dy) / denom


def rank_correlation(records: Sequence[PolicyEvalRecord], estimator: str) -> float:
    if len(records) < 2:
        raise ValueError("rank correlation needs at least 2 policies")
    return spearman([r.actual for r in records], [r.estimates[estimator] for r in records])


def regret_at_1(records: Sequence[PolicyEvalRecord], estimator: str) -> float:
    """(best actual value - actual value of the estimator's top pick) / best actual value."""
    if not records:
        raise ValueError("need at least one policy")
    actual = np.array([r.actual for r in records], dtype=np.float64)
    est = np.array([r.estimates[estimator] for r in records], dtype=np.float64)
    best = actual.max()
    if best == 0:
        raise ZeroDivisionError("regret@1 is undefined when the best actual value is 0")
    pick = int(np.argmax(est))
    return float((best - actual[pick]) / best)


def mae(actual: float, estimate: float) -> float:
    return abs(actual - estimate)


# ---------------------------------------------------------------------------
# Wilcoxon rank-sum / Mann-Whitney U


@dataclass
class RankSumResult:
    U: float
    p_value: float
    exact: bool


def _rank_sum_distribution(doubled_ranks: np.ndarray, n: int) -> dict[int, int]:
    """Counts of each (doubled) rank sum over all size-n subsets of the pooled ranks."""
    # dp[k] maps a doubled rank sum to the number of k-subsets achieving it
    dp: list[dict[int, int]] = [dict() for _ in range(n + 1)]
    dp[0][0] = 1
    for r in doubled_ranks:
        r = int(r)
        for k in range(n, 0, -1):
            prev = dp[k - 1]
            if not prev:
                continue
            cur = dp[k]
            for s, c in prev.items():
                cur[s + r] = cur.get(s + r, 0) + c
    return dp[n]


def wilcoxon_rank_sum(sample_a: Sequence[float], sample_b: Sequence[float], exact_limit: int = 20) -> RankSumResult:
    """Two-sided rank-sum test with midranks for ties.

    Exact permutation distribution of the rank sum when the pooled size is at
    most ``exact_limit``; tie-corrected normal approximation otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    n, m = a.size, b.size
    if n == 0 or m == 0:
        raise ValueError("both samples must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    R = float(ranks[:n].sum())
    U = R - n * (n + 1) / 2.0
    N = n + m
    expected = n * (N + 1) / 2.0

    if N <= exact_limit:
        doubled = np.rint(2 * ranks).astype(np.int64)
        dist = _rank_sum_distribution(doubled, n)
        total = sum(dist.values())
        observed = abs(2 * R - 2 * expected)
        extreme = sum(c for s, c in dist.items() if abs(s - 2 * expected) >= observed - 1e-9)
        return RankSumResult(U, min(1.0, extreme / total), True)

    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = n * m / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    if var <= 0:
        return RankSumResult(U, 1.0, False)
    z = (R - expected) / math.sqrt(var)
    p = 2.0 * ndtr(-abs(z))
    return RankSumResult(U, float(min(1.0, p)), False)

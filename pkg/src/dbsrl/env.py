"""Synthetic patient and implanted stimulator.

Beta amplitude follows a first-order autoregressive response to stimulation,

    beta[k+1] = (1 - rho) * baseline * (1 - g * a[k]) + rho * beta[k] + noise,

clipped at zero. The controller observes a sliding window of the last ``W``
samples taken every ``m`` seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .config import read_kv
from .replay import Trajectory, Transition
from .rewards import QoCReport, RewardConfig, end_session_reward, grasp_frequency, step_reward, tremor_percentage

Policy = Callable[[np.ndarray], float]


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatientProfile:
    profile_id: str = "reference"
    baseline_beta: float = 1.0
    suppression_gain: float = 0.8
    ar_coefficient: float = 0.7
    noise_std: float = 0.04
    beta_threshold: float = 0.6
    tremor_threshold: float = 0.75
    grasp_base: float = 1.5
    qoc_noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.suppression_gain <= 1.0:
            raise ValueError(f"suppression_gain must lie in (0, 1], got {self.suppression_gain}")
        if not 0.0 <= self.ar_coefficient < 1.0:
            raise ValueError(f"ar_coefficient must lie in [0, 1), got {self.ar_coefficient}")
        if self.baseline_beta <= self.beta_threshold:
            raise ValueError("baseline_beta must exceed beta_threshold (unstimulated beta is pathological)")
        if self.noise_std < 0 or self.qoc_noise_std < 0:
            raise ValueError("noise levels must be non-negative")
        if self.grasp_base <= 0:
            raise ValueError("grasp_base must be positive")

    @classmethod
    def from_file(cls, path) -> "PatientProfile":
        values = read_kv(Path(path))
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown profile keys: {sorted(unknown)}")
        if "profile_id" in values:
            values["profile_id"] = str(values["profile_id"])
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def reward_config_for(profile: PatientProfile, **overrides) -> RewardConfig:
    """Reward constants with the threshold taken from the patient profile."""
    return RewardConfig(xi_beta=profile.beta_threshold, **overrides)


@dataclass
class SessionHistory:
    betas: list[float]
    actions: list[float]


class BGEnv:
    """One patient session at a time; not thread-safe."""

    def __init__(self, profile: PatientProfile, reward: RewardConfig | None = None, window: int = 10, interval_s: float = 2.0):
        if window < 1:
            raise ValueError("window must hold at least one sample")
        self.profile = profile
        self.reward = reward or reward_config_for(profile)
        self.window = window
        self.interval_s = interval_s
        self._state: np.ndarray | None = None
        self._history: SessionHistory | None = None
        self._rng: np.random.Generator | None = None
        self._qoc_rng: np.random.Generator | None = None
        self.clock = 0

    def _next_beta(self, beta: float, action: float) -> float:
        p = self.profile
        drive = (1.0 - p.ar_coefficient) * p.baseline_beta * (1.0 - p.suppression_gain * action)
        noise = p.noise_std * self._rng.standard_normal() if p.noise_std > 0 else 0.0
        return max(0.0, drive + p.ar_coefficient * beta + noise)

    def reset(self, seed: int) -> np.ndarray:
        step_seq, qoc_seq = np.random.SeedSequence(seed).spawn(2)
        self._rng = np.random.default_rng(step_seq)
        self._qoc_rng = np.random.default_rng(qoc_seq)
        p = self.profile
        stationary_std = p.noise_std / math.sqrt(1.0 - p.ar_coefficient**2)
        beta = p.baseline_beta
        if stationary_std > 0:
            beta = max(0.0, p.baseline_beta + stationary_std * self._rng.standard_normal())
        samples = [beta]
        for _ in range(self.window - 1):
            samples.append(self._next_beta(samples[-1], 0.0))
        self._state = np.array(samples)
        self._history = SessionHistory(betas=[], actions=[])
        self.clock = 0
        return self._state.copy()

    @property
    def state(self) -> np.ndarray:
        if self._state is None:
            raise SessionError("call reset() first")
        return self._state.copy()

    def step(self, action: float) -> tuple[np.ndarray, float]:
        if self._state is None or self._history is None:
            raise SessionError("session not started or already ended")
        action = float(action)
        if not 0.0 <= action <= 1.0:
            raise ValueError(f"action must lie in [0, 1], got {action}")
        beta_new = self._next_beta(float(self._state[-1]), action)
        nxt = np.empty_like(self._state)
        nxt[:-1] = self._state[1:]
        nxt[-1] = beta_new
        probe = float(nxt.mean()) if self.reward.window_mean_threshold else beta_new
        r = step_reward(probe, action, self.reward)
        self._state = nxt
        self._history.betas.append(beta_new)
        self._history.actions.append(action)
        self.clock += 1
        return nxt.copy(), r

    def end_session(self) -> tuple[QoCReport, float]:
        if self._history is None or not self._history.betas:
            raise SessionError("end_session needs at least one step")
        qoc = synthesize_qoc(self._history, self.profile, self.interval_s, self._qoc_rng)
        r_end = end_session_reward(qoc, self.reward.C2, self.reward.C3, self.reward.C4)
        self._history = None
        return qoc, r_end


def synthesize_qoc(history: SessionHistory, profile: PatientProfile, interval_s: float, rng: np.random.Generator) -> QoCReport:
    """Session-level symptom scores driven by how well beta was suppressed."""
    betas = np.asarray(history.betas)
    T = betas.size
    u = float(np.mean(betas < profile.beta_threshold))

    # 10 s hand-grasp test; jittered gaps around the suppression-driven rate
    target_hz = profile.grasp_base * (0.5 + u)
    n_gaps = max(1, int(10.0 * target_hz))
    jitter = rng.standard_normal(n_gaps) * profile.qoc_noise_std
    grasp = grasp_frequency(np.exp(jitter) / target_hz)

    rate = int(min(10, max(1, math.floor(1.0 + 9.0 * u + 0.5))))

    # tremor classified once per minute from the minute's mean beta
    per_minute = max(1, int(round(60.0 / interval_s)))
    tremor_s = 0.0
    for start in range(0, T, per_minute):
        block = betas[start : start + per_minute]
        if block.mean() > profile.tremor_threshold:
            tremor_s += block.size * interval_s
    tremor = tremor_percentage(tremor_s, 0.0, 0.0, T * interval_s)
    return QoCReport(grasp_hz=grasp, rate=rate, tremor_pct=tremor, length_steps=T)


def run_session(
    policy: Policy,
    profile: PatientProfile,
    horizon: int = 150,
    seed: int = 0,
    *,
    reward: RewardConfig | None = None,
    session_id: str | None = None,
    controller_id: str = "unknown",
    window: int = 10,
):
    """Roll one full session under ``policy`` and package it as a Trajectory."""
    if horizon < 1:
        raise SessionError("horizon must be at least 1")
    act = policy.act if hasattr(policy, "act") else policy
    env = BGEnv(profile, reward, window=window)
    s = env.reset(seed)
    transitions = []
    for t in range(horizon):
        a = float(act(s))
        s2, r = env.step(a)
        transitions.append(Transition(t, s, a, r, s2))
        s = s2
    qoc, r_end = env.end_session()
    return Trajectory(
        session_id=session_id or f"{profile.profile_id}-{controller_id}-{seed}",
        controller_id=controller_id,
        profile_id=profile.profile_id,
        seed=seed,
        constants=env.reward.constants(),
        transitions=transitions,
        qoc=qoc,
        r_end=r_end,
    )

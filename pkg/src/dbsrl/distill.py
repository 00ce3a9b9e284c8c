"""Compress a large policy into a small student by regression on its outputs."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .actor_critic import PolicyNet, TrainingError
from .diffnum import Adam, Tape
from .replay import ReplayBuffer, Trajectory


@dataclass
class DistillConfig:
    hidden: tuple = (20, 10)
    # None -> 0.05 x per-dimension std of the training states
    sigma: float | None = None
    n_aug: int = 4
    lr: float = 1e-3
    steps: int = 5000
    batch_size: int = 64
    seed: int = 0
    holdout_frac: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.n_aug < 0:
            raise ValueError("n_aug must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DistillResult:
    student: PolicyNet
    final_loss: float
    losses: list[float]
    sigma: np.ndarray


def augment(states: np.ndarray, sigma, n_aug: int, seed) -> np.ndarray:
    """Originals followed by ``n_aug`` Gaussian-perturbed copies of each state."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    if n_aug == 0:
        return states.copy()
    rng = np.random.default_rng(seed)
    reps = np.repeat(states, n_aug, axis=0)
    noisy = reps + rng.standard_normal(reps.shape) * sigma
    return np.concatenate([states, noisy], axis=0)


def distill_loss(teacher_out, student_out) -> float:
    """Mean squared difference between teacher and student actions."""
    d = np.asarray(teacher_out, dtype=np.float64) - np.asarray(student_out, dtype=np.float64)
    return float(np.mean(d * d))


def split_holdout(buffer: ReplayBuffer, frac: float = 0.1) -> tuple[list[Trajectory], list[Trajectory]]:
    """Trajectories sorted by session_id; the last ``frac`` share is held out."""
    trajs = sorted(buffer.trajectories, key=lambda t: t.session_id)
    if len(trajs) < 2 or frac <= 0:
        return trajs, []
    n_hold = min(len(trajs) - 1, max(1, math.ceil(frac * len(trajs))))
    return trajs[:-n_hold], trajs[-n_hold:]


def states_of(trajs: list[Trajectory]) -> np.ndarray:
    return np.concatenate([t.states for t in trajs])


def distill(teacher: PolicyNet, config: DistillConfig, buffer: ReplayBuffer, student: PolicyNet | None = None) -> DistillResult:
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    train_trajs, _ = split_holdout(buffer, config.holdout_frac)
    base = states_of(train_trajs)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    sigma = 0.05 * base.std(axis=0) if config.sigma is None else np.full(base.shape[1], float(config.sigma))
    X = augment(base, sigma, config.n_aug, seeds[0])
    Y = teacher.act_batch(X).reshape(-1, 1)

    student = student.clone() if student is not None else PolicyNet(teacher.state_dim, config.hidden, seeds[1])
    opt = Adam(student.parameters(), config.lr)
    rng = np.random.default_rng(seeds[2])
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(X), size=config.batch_size)
        with Tape() as tape:
            d = student(X[idx]) - Y[idx]
            loss = (d * d).mean()
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite distillation loss at step {step}")
        tape.backward(loss)
        opt.step()
        losses.append(value)
    final = distill_loss(Y[:, 0], student.act_batch(X))
    return DistillResult(student=student, final_loss=final, losses=losses, sigma=sigma)


def _time_forward(policy: PolicyNet, state: np.ndarray) -> float:
    t0 = time.perf_counter()
    policy.act(state)
    return time.perf_counter() - t0


def fidelity_report(teacher: PolicyNet, student: PolicyNet, held_out: np.ndarray, n_timing: int = 200) -> dict:
    """Output deviation on held-out states and single-state forward-pass timing."""
    held_out = np.atleast_2d(held_out)
    gap = np.abs(teacher.act_batch(held_out) - student.act_batch(held_out))
    probe = held_out[0]
    for _ in range(10):  # warm caches before timing
        teacher.act(probe)
        student.act(probe)
    samples = {"teacher": [], "student": []}
    for i in range(n_timing):
        state = held_out[i % len(held_out)]
        # alternate the order so neither network always runs second
        order = ("teacher", "student") if i % 2 == 0 else ("student", "teacher")
        for name in order:
            samples[name].append(_time_forward(teacher if name == "teacher" else student, state))
    return {
        "max_abs_dev": float(gap.max()),
        "mean_abs_dev": float(gap.mean()),
        "n_states": int(len(held_out)),
        "timing": {
            name: {"median_s": float(np.median(v)), "mean_s": float(np.mean(v)), "std_s": float(np.std(v)), "n": len(v), "samples": v}
            for name, v in samples.items()
        },
    }

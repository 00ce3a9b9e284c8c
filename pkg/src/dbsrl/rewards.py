"""Per-step reward, session quality-of-control metrics and returns."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RewardConfig:
    r_a: float = 0.0
    r_b: float = -1.0
    C1: float = 0.3
    C2: float = 10.0
    C3: float = 10.0
    C4: float = 10.0
    gamma: float = 0.99
    xi_beta: float = 0.6
    # threshold the mean of the state window instead of the newest sample
    window_mean_threshold: bool = False

    def __post_init__(self):
        if not self.r_a >= 0 > self.r_b:
            raise ValueError(f"need r_a >= 0 > r_b, got r_a={self.r_a}, r_b={self.r_b}")
        if self.C1 <= 0:
            raise ValueError("C1 must be positive")
        if min(self.C2, self.C3, self.C4) < 0:
            raise ValueError("C2, C3, C4 must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    def constants(self) -> dict:
        """The block stored alongside every trajectory."""
        d = asdict(self)
        d.pop("window_mean_threshold")
        return {k: float(v) for k, v in d.items()}


@dataclass(frozen=True)
class QoCReport:
    grasp_hz: float
    rate: int
    tremor_pct: float
    length_steps: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.grasp_hz) and self.grasp_hz > 0):
            raise ValueError(f"grasp frequency must be positive, got {self.grasp_hz}")
        if int(self.rate) != self.rate or not 1 <= self.rate <= 10:
            raise ValueError(f"rating must be an integer in [1, 10], got {self.rate}")
        if not 0.0 <= self.tremor_pct <= 100.0:
            raise ValueError(f"tremor percentage must be in [0, 100], got {self.tremor_pct}")


def step_reward(beta_new: float, action: float, cfg: RewardConfig) -> float:
    """r_a - C1 a below the beta threshold, r_b - C1 a at or above it."""
    base = cfg.r_a if beta_new < cfg.xi_beta else cfg.r_b
    return base - cfg.C1 * action


def grasp_frequency(gaps: Sequence[float]) -> float:
    """Grasps per second from the N-1 gaps between consecutive open fists."""
    gaps = np.asarray(gaps, dtype=np.float64)
    if gaps.size == 0 or np.any(gaps <= 0):
        raise ValueError("need at least one positive inter-grasp gap")
    return 1.0 / float(gaps.mean())


def tremor_percentage(mild: float, moderate: float, strong: float, session: float) -> float:
    """Share of session time spent in mild or worse tremor, in percent."""
    if session <= 0:
        raise ValueError("session length must be positive")
    return (mild + moderate + strong) / session * 100.0


def end_session_reward(qoc: QoCReport, C2: float, C3: float, C4: float) -> float:
    """C2 grasp + C3 rate - C4 tremor, with tremor entered as a fraction."""
    return C2 * qoc.grasp_hz + C3 * qoc.rate - C4 * (qoc.tremor_pct / 100.0)


def discounted_return(rewards: Sequence[float], gamma: float, r_end: float | None = None) -> float:
    """sum_k gamma^k r_k, plus the undiscounted end-of-session reward if given."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    if r_end is not None:
        total += r_end
    return total

"""Experience store: sessions of transitions plus end-of-session outcomes.

On disk a buffer is line-delimited JSON, one trajectory per line::

    {"v":1,"session_id":...,"controller_id":...,"profile_id":...,"seed":...,
     "constants":{"r_a","r_b","C1","C2","C3","C4","gamma","xi_beta"},
     "transitions":[{"t","s","a","r","s2"},...],
     "qoc":{"grasp_hz","rate","tremor_pct"},"r_end":...}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .rewards import QoCReport, discounted_return, end_session_reward

SCHEMA_VERSION = 1
CONSTANT_KEYS = ("r_a", "r_b", "C1", "C2", "C3", "C4", "gamma", "xi_beta")


class ReplayError(ValueError):
    pass


class EmptyBufferError(ReplayError):
    pass


@dataclass(frozen=True, eq=False)
class Transition:
    t: int
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray


@dataclass(eq=False)
class Trajectory:
    session_id: str
    controller_id: str
    profile_id: str
    seed: int
    constants: dict
    transitions: list[Transition]
    qoc: QoCReport
    r_end: float

    def __len__(self) -> int:
        return len(self.transitions)

    def __eq__(self, other) -> bool:
        return isinstance(other, Trajectory) and self.to_json() == other.to_json()

    @cached_property
    def states(self) -> np.ndarray:
        """s_0..s_T stacked, shape (T+1, W)."""
        rows = [tr.state for tr in self.transitions] + [self.transitions[-1].next_state]
        return np.asarray(rows, dtype=np.float64)

    @cached_property
    def actions(self) -> np.ndarray:
        return np.array([tr.action for tr in self.transitions], dtype=np.float64)

    @cached_property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions], dtype=np.float64)

    @property
    def gamma(self) -> float:
        return float(self.constants["gamma"])

    def total_return(self, gamma: float | None = None) -> float:
        return discounted_return(self.rewards, self.gamma if gamma is None else gamma, self.r_end)

    def validate(self) -> None:
        sid = self.session_id
        if not self.transitions:
            raise ReplayError(f"session {sid!r}: no transitions")
        width = len(self.transitions[0].state)
        for i, tr in enumerate(self.transitions):
            if tr.t != i:
                raise ReplayError(f"session {sid!r}: step index {tr.t} at position {i}")
            if len(tr.state) != width or len(tr.next_state) != width:
                raise ReplayError(f"session {sid!r}: step {i} state width differs from {width}")
            if not 0.0 <= tr.action <= 1.0:
                raise ReplayError(f"session {sid!r}: step {i} action {tr.action} outside [0, 1]")
        missing = [k for k in CONSTANT_KEYS if k not in self.constants]
        if missing:
            raise ReplayError(f"session {sid!r}: constants missing {missing}")
        c = self.constants
        expected = end_session_reward(self.qoc, c["C2"], c["C3"], c["C4"])
        if not math.isclose(expected, self.r_end, rel_tol=1e-12, abs_tol=1e-12):
            raise ReplayError(f"session {sid!r}: r_end {self.r_end} does not match QoC-derived {expected}")

    def to_json(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "session_id": self.session_id,
            "controller_id": self.controller_id,
            "profile_id": self.profile_id,
            "seed": int(self.seed),
            "constants": {k: float(self.constants[k]) for k in CONSTANT_KEYS},
            "transitions": [
                {
                    "t": tr.t,
                    "s": [float(x) for x in tr.state],
                    "a": float(tr.action),
                    "r": float(tr.reward),
                    "s2": [float(x) for x in tr.next_state],
                }
                for tr in self.transitions
            ],
            "qoc": {"grasp_hz": float(self.qoc.grasp_hz), "rate": int(self.qoc.rate), "tremor_pct": float(self.qoc.tremor_pct)},
            "r_end": float(self.r_end),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Trajectory":
        if doc.get("v") != SCHEMA_VERSION:
            raise ReplayError(f"unsupported schema version {doc.get('v')!r}")
        transitions = [
            Transition(int(d["t"]), np.asarray(d["s"], dtype=np.float64), float(d["a"]), float(d["r"]), np.asarray(d["s2"], dtype=np.float64))
            for d in doc["transitions"]
        ]
        q = doc["qoc"]
        return cls(
            session_id=str(doc["session_id"]),
            controller_id=str(doc["controller_id"]),
            profile_id=str(doc["profile_id"]),
            seed=int(doc["seed"]),
            constants={k: float(v) for k, v in doc["constants"].items()},
            transitions=transitions,
            qoc=QoCReport(grasp_hz=float(q["grasp_hz"]), rate=int(q["rate"]), tremor_pct=float(q["tremor_pct"]), length_steps=len(transitions)),
            r_end=float(doc["r_end"]),
        )


@dataclass
class ReplayBuffer:
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        given, self.trajectories = self.trajectories, []
        self._ids: set[str] = set()
        self._offsets: list[int] = [0]
        for traj in given:
            self.append(traj)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return self._offsets[-1]

    def append(self, traj: Trajectory) -> "ReplayBuffer":
        traj.validate()
        if traj.session_id in self._ids:
            raise ReplayError(f"duplicate session_id {traj.session_id!r}")
        self.trajectories.append(traj)
        self._ids.add(traj.session_id)
        self._offsets.append(self._offsets[-1] + len(traj))
        self.__dict__.pop("_flat", None)
        return self

    def transition(self, index: int) -> Transition:
        """Look up a transition by its position in the flat index."""
        if not 0 <= index < self.n_transitions:
            raise IndexError(index)
        k = int(np.searchsorted(self._offsets, index, side="right")) - 1
        return self.trajectories[k].transitions[index - self._offsets[k]]

    def flat_arrays(self) -> dict[str, np.ndarray]:
        """All transitions as stacked arrays (s, a, r, s2), in flat-index order."""
        if "_flat" not in self.__dict__:
            if not self.trajectories:
                raise EmptyBufferError("buffer is empty")
            s = np.concatenate([t.states[:-1] for t in self.trajectories])
            s2 = np.asarray([tr.next_state for t in self.trajectories for tr in t.transitions], dtype=np.float64)
            a = np.concatenate([t.actions for t in self.trajectories])
            r = np.concatenate([t.rewards for t in self.trajectories])
            self.__dict__["_flat"] = {"s": s, "a": a, "r": r, "s2": s2}
        return self.__dict__["_flat"]

    def by_controller(self) -> dict[str, list[Trajectory]]:
        groups: dict[str, list[Trajectory]] = {}
        for t in self.trajectories:
            groups.setdefault(t.controller_id, []).append(t)
        return groups


def append(buffer: ReplayBuffer, trajectory: Trajectory) -> ReplayBuffer:
    return buffer.append(trajectory)


def sample_indices(buffer: ReplayBuffer, n: int, seed) -> np.ndarray:
    if len(buffer) == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    rng = np.random.default_rng(seed)
    return rng.integers(0, buffer.n_transitions, size=n)


def sample_transitions(buffer: ReplayBuffer, n: int, seed) -> list[Transition]:
    """``n`` uniform draws with replacement from the flat transition index."""
    return [buffer.transition(int(i)) for i in sample_indices(buffer, n, seed)]


def sample_trajectories(buffer: ReplayBuffer, n: int, seed) -> list[Trajectory]:
    """``n`` distinct trajectories chosen uniformly (no repeats within a batch)."""
    if len(buffer) == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    if n > len(buffer):
        raise ReplayError(f"batch of {n} exceeds the {len(buffer)} stored trajectories")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(buffer), size=n, replace=False)
    return [buffer.trajectories[int(i)] for i in picks]


def dumps_line(traj: Trajectory) -> str:
    return json.dumps(traj.to_json(), separators=(",", ":"))


def save(buffer: ReplayBuffer | Iterable[Trajectory], path) -> None:
    trajs = buffer.trajectories if isinstance(buffer, ReplayBuffer) else list(buffer)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajs:
            fh.write(dumps_line(traj) + "\n")


def load(path) -> ReplayBuffer:
    buffer = ReplayBuffer()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                traj = Trajectory.from_json(doc)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ReplayError(f"{path}:{lineno}: malformed trajectory line ({exc})") from None
            except ValueError as exc:
                if isinstance(exc, ReplayError):
                    raise ReplayError(f"{path}:{lineno}: {exc}") from None
                raise ReplayError(f"{path}:{lineno}: invalid trajectory ({exc})") from None
            buffer.append(traj)
    return buffer


def load_many(paths: Iterable) -> ReplayBuffer:
    buffer = ReplayBuffer()
    for p in paths:
        for traj in load(p):
            buffer.append(traj)
    return buffer

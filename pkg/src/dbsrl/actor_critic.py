"""Offline deterministic actor-critic trained purely from replayed transitions."""

from __future__ import annotations

import copy
import hashlib
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffnum import MLP, Adam, Module, Tape, Tensor, concat
from .diffnum import checkpoint as ckpt
from .diffnum.tensor import DimensionError
from .replay import ReplayBuffer, sample_indices
from .rewards import discounted_return

__all__ = [
    "CriticNet",
    "PolicyNet",
    "TrainConfig",
    "TrainingError",
    "act",
    "actor_step",
    "behavior_policy_uniform",
    "discounted_return",
    "load_policy",
    "save_agent",
    "train_offline",
]

SCRATCH_LR_RANGE = (1e-5, 1e-3)
FINETUNE_LR_RANGE = (1e-7, 1e-5)


class TrainingError(RuntimeError):
    pass


class PolicyNet(Module):
    """Feedforward state -> action map squashed into [0, 1] by a sigmoid."""

    def __init__(self, state_dim: int, hidden: Sequence[int] = (400, 300), seed=0, zero_final: bool = False):
        rng = np.random.default_rng(seed)
        self.state_dim = state_dim
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [state_dim, *self.hidden, 1]
        acts = ["relu"] * len(self.hidden) + ["sigmoid"]
        self.net = MLP(sizes, acts, rng, prefix="actor.")
        if zero_final:
            self.net.weights[-1].data[:] = 0.0
            self.net.biases[-1].data[:] = 0.0

    def named_parameters(self):
        return self.net.named_parameters()

    def architecture(self) -> dict:
        return {"kind": "policy", "state_dim": self.state_dim, "hidden": list(self.hidden)}

    def __call__(self, states) -> Tensor:
        return self.net(states)

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != self.state_dim:
            raise DimensionError(f"state width {states.shape[-1]} != policy input width {self.state_dim}")
        return self.net.predict(states)[..., 0]

    def act(self, state) -> float:
        return float(self.act_batch(np.asarray(state, dtype=np.float64)))

    def clone(self) -> "PolicyNet":
        return copy.deepcopy(self)


class CriticNet(Module):
    """Q(s, a): feedforward on the concatenated state and action."""

    def __init__(self, state_dim: int, hidden: Sequence[int] = (400, 300), seed=0):
        rng = np.random.default_rng(seed)
        self.state_dim = state_dim
        self.hidden = tuple(int(h) for h in hidden)
        sizes = [state_dim + 1, *self.hidden, 1]
        self.net = MLP(sizes, ["relu"] * len(self.hidden) + ["linear"], rng, prefix="critic.")

    def named_parameters(self):
        return self.net.named_parameters()

    def architecture(self) -> dict:
        return {"kind": "critic", "state_dim": self.state_dim, "hidden": list(self.hidden)}

    def __call__(self, states, actions) -> Tensor:
        a = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, dtype=np.float64).reshape(-1, 1))
        return self.net(concat([states, a], axis=-1))

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = np.concatenate([states, np.asarray(actions).reshape(-1, 1)], axis=-1)
        return self.net.predict(x)[:, 0]

    def clone(self) -> "CriticNet":
        return copy.deepcopy(self)


def act(policy: PolicyNet, state) -> float:
    return policy.act(state)


def behavior_policy_uniform(B: float, seed=None) -> Callable[[np.ndarray], float]:
    """Stochastic behavior policy drawing amplitudes uniformly from [B, 1]."""
    if not 0.0 <= B < 1.0:
        raise ValueError(f"lower bound B must lie in [0, 1), got {B}")
    rng = np.random.default_rng(seed)

    def policy(state=None) -> float:
        return float(rng.uniform(B, 1.0))

    policy.lower = B
    return policy


@dataclass
class TrainConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    batch_size: int = 64
    steps: int = 10_000
    tau: float = 0.005
    seed: int = 0
    hidden: tuple = (400, 300)
    clip_norm: float = 10.0
    mode: str = "scratch"
    # weight of a (a - a_data)^2 penalty on the actor; off by default
    behavior_reg: float = 0.0
    log_every: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.mode not in ("scratch", "finetune"):
            raise ValueError(f"mode must be 'scratch' or 'finetune', got {self.mode!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")

    def lr_warnings(self) -> list[str]:
        lo, hi = SCRATCH_LR_RANGE if self.mode == "scratch" else FINETUNE_LR_RANGE
        out = []
        for name in ("actor_lr", "critic_lr"):
            value = getattr(self, name)
            if not lo <= value <= hi:
                out.append(f"{name}={value:g} outside the {self.mode} range [{lo:g}, {hi:g}]")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainLog:
    step: list[int] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    actor_q: list[float] = field(default_factory=list)
    mean_action: list[float] = field(default_factory=list)

    def rows(self):
        yield from zip(self.step, self.critic_loss, self.actor_q, self.mean_action)


def soft_update(target: Module, source: Module, tau: float) -> None:
    for t, s in zip(target.parameters(), source.parameters()):
        t.data = (1.0 - tau) * t.data + tau * s.data


def _set_trainable(module: Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad = flag


def critic_step(critic: CriticNet, opt: Adam, s, a, y) -> float:
    with Tape() as tape:
        q = critic(s, a)
        diff = q - y.reshape(-1, 1)
        loss = (diff * diff).mean()
    tape.backward(loss)
    opt.step()
    return loss.item()


def actor_step(actor: PolicyNet, critic: CriticNet, opt: Adam, s: np.ndarray, behavior_a=None, behavior_reg: float = 0.0) -> float:
    """One ascent step on mean Q(s, pi(s)) with the critic held fixed."""
    _set_trainable(critic, False)
    try:
        with Tape() as tape:
            pa = actor(s)
            q = critic(s, pa).mean()
            loss = -q
            if behavior_reg > 0 and behavior_a is not None:
                d = pa - np.asarray(behavior_a).reshape(-1, 1)
                loss = loss + behavior_reg * (d * d).mean()
        tape.backward(loss)
        opt.step()
    finally:
        _set_trainable(critic, True)
    return q.item()


def train_offline(
    buffer: ReplayBuffer,
    config: TrainConfig,
    actor: PolicyNet | None = None,
    critic: CriticNet | None = None,
) -> tuple[PolicyNet, CriticNet, TrainLog]:
    """Alternate critic regression and actor ascent over replayed transitions."""
    for msg in config.lr_warnings():
        warnings.warn(msg, stacklevel=2)
    data = buffer.flat_arrays()
    W = data["s"].shape[1]
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    actor = actor.clone() if actor is not None else PolicyNet(W, config.hidden, seeds[0])
    critic = critic.clone() if critic is not None else CriticNet(W, config.hidden, seeds[1])
    actor_t, critic_t = actor.clone(), critic.clone()
    opt_a = Adam(actor.parameters(), config.actor_lr, clip_norm=config.clip_norm)
    opt_c = Adam(critic.parameters(), config.critic_lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng(seeds[2])
    log = TrainLog()

    for step in range(config.steps):
        idx = sample_indices(buffer, config.batch_size, rng)
        s, a, r, s2 = data["s"][idx], data["a"][idx], data["r"][idx], data["s2"][idx]
        y = r + config.gamma * critic_t.predict(s2, actor_t.act_batch(s2))
        c_loss = critic_step(critic, opt_c, s, a, y)
        q = actor_step(actor, critic, opt_a, s, a, config.behavior_reg)
        if not (np.isfinite(c_loss) and np.isfinite(q)):
            raise TrainingError(f"non-finite loss at step {step}: critic={c_loss}, actor_q={q}")
        soft_update(actor_t, actor, config.tau)
        soft_update(critic_t, critic, config.tau)
        if config.log_every and step % config.log_every == 0:
            log.step.append(step)
            log.critic_loss.append(c_loss)
            log.actor_q.append(q)
            log.mean_action.append(float(actor.act_batch(s).mean()))
    return actor, critic, log


def buffer_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_agent(path, actor: PolicyNet, critic: CriticNet | None = None, meta: dict | None = None) -> None:
    tensors = actor.state_dict()
    arch = {"actor": actor.architecture()}
    if critic is not None:
        tensors.update(critic.state_dict())
        arch["critic"] = critic.architecture()
    ckpt.save(path, tensors, {"architecture": arch, **(meta or {})})


def load_policy(path) -> tuple[PolicyNet, dict]:
    tensors, meta = ckpt.load(path)
    arch = meta["architecture"]["actor"]
    policy = PolicyNet(arch["state_dim"], arch["hidden"])
    policy.load_state_dict(tensors)
    return policy, meta


def load_agent(path) -> tuple[PolicyNet, CriticNet | None, dict]:
    tensors, meta = ckpt.load(path)
    arch = meta["architecture"]
    actor = PolicyNet(arch["actor"]["state_dim"], arch["actor"]["hidden"])
    actor.load_state_dict(tensors)
    critic = None
    if "critic" in arch:
        critic = CriticNet(arch["critic"]["state_dim"], arch["critic"]["hidden"])
        critic.load_state_dict(tensors)
    return actor, critic, meta

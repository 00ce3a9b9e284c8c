from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def adam_update(params: list[Tensor], state: AdamState, clip_norm: float | None = None) -> float:
    """Apply one bias-corrected Adam descent step and clear grads.

    Returns the pre-clipping global gradient norm.
    """
    missing = [p.name or f"#{i}" for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters {missing}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ContractError("Adam moments do not match the parameter list")

    grads = [p.grad for p in params]
    norm = global_norm(grads)
    if clip_norm is not None and norm > clip_norm:
        grads = [g * (clip_norm / norm) for g in grads]

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None
    return norm


class Adam:
    """Thin owner of a parameter list plus its :class:`AdamState`."""

    def __init__(self, params: list[Tensor], lr: float, clip_norm: float | None = None, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)
        self.clip_norm = clip_norm

    def step(self) -> float:
        return adam_update(self.params, self.state, self.clip_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

"""Central finite-difference gradients, used to audit the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[], float], t: Tensor, step: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences; ``f`` re-reads ``t.data`` on each call."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return grad


def analytic_grads(build: Callable[[], Tensor], params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(max |a|, max |b|, floor) over the whole tensor.

    Scaling by the tensor's largest entry keeps round-off in near-zero
    entries from dominating the comparison.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


def check_gradients(build: Callable[[], Tensor], params: list[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    analytic = analytic_grads(build, params)

    def f() -> float:
        return float(build().data)

    worst = 0.0
    for p, g in zip(params, analytic):
        worst = max(worst, relative_error(g, numeric_grad(f, p, step)))
    return worst


def directional_check(build: Callable[[], Tensor], params: list[Tensor], rng: np.random.Generator, step: float = 1e-5) -> float:
    """Relative error of the derivative along one random unit direction.

    Costs two extra forward passes regardless of the parameter count.
    """
    analytic = analytic_grads(build, params)
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    dirs = [d / norm for d in dirs]
    slope = sum(float(np.sum(g * d)) for g, d in zip(analytic, dirs))
    originals = [p.data.copy() for p in params]

    def at(eps: float) -> float:
        for p, o, d in zip(params, originals, dirs):
            p.data = o + eps * d
        return float(build().data)

    try:
        numeric = (at(step) - at(-step)) / (2.0 * step)
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return abs(slope - numeric) / max(abs(slope), abs(numeric), 1e-8)

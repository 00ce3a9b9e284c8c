"""Diagonal Gaussians parameterized by mean and log-variance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, NumericError, Tensor, as_tensor, clip, exp, expm1, mul, square, tsum

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class GaussianDiag:
    mean: Tensor
    log_var: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.log_var = as_tensor(self.log_var)
        if self.mean.shape != self.log_var.shape:
            raise DimensionError(f"mean {self.mean.shape} and log_var {self.log_var.shape} differ")

    @classmethod
    def from_head(cls, mean: Tensor, raw_log_var: Tensor) -> "GaussianDiag":
        """Build from a network head, clamping log-variance to the safe range."""
        return cls(mean, clip(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX))

    @classmethod
    def standard(cls, dim: int, batch: int | None = None) -> "GaussianDiag":
        shape = (dim,) if batch is None else (batch, dim)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)

    def detach(self) -> "GaussianDiag":
        return GaussianDiag(self.mean.detach(), self.log_var.detach())


def _check_finite(g: GaussianDiag) -> None:
    if not np.all(np.isfinite(g.log_var.data)):
        raise NumericError("log_var contains non-finite values")


def gaussian_sample_reparam(g: GaussianDiag, noise) -> Tensor:
    """mean + exp(0.5 log_var) * noise, differentiable in mean and log_var."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise DimensionError(f"noise {noise.shape} does not match mean {g.mean.shape}")
    return g.mean + mul(exp(mul(g.log_var, 0.5)), noise)


def gaussian_log_prob(g: GaussianDiag, x) -> Tensor:
    """Log density summed over the last axis."""
    x = as_tensor(x)
    if x.shape != g.mean.shape:
        raise DimensionError(f"x {x.shape} does not match mean {g.mean.shape}")
    _check_finite(g)
    quad = square(x - g.mean) * exp(-g.log_var)
    per_dim = -_HALF_LOG_2PI - 0.5 * g.log_var - 0.5 * quad
    return tsum(per_dim, axis=-1)


def gaussian_kl(q: GaussianDiag, p: GaussianDiag) -> Tensor:
    """KL(q || p) in closed form, summed over the last axis."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"q {q.mean.shape} and p {p.mean.shape} differ")
    _check_finite(q)
    _check_finite(p)
    diff = q.log_var - p.log_var
    inv_var_p = exp(-p.log_var)
    # expm1(d) - d stays >= 0 in floating point where exp(d) - 1 - d can round below zero
    per_dim = 0.5 * ((expm1(diff) - diff) + square(q.mean - p.mean) * inv_var_p)
    return tsum(per_dim, axis=-1)


def sample_numpy(mean: np.ndarray, log_var: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Tape-free sampling used by rollouts."""
    return mean + np.exp(0.5 * log_var) * rng.standard_normal(mean.shape)

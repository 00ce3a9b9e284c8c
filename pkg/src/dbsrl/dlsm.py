"""Deep latent sequential model for model-based off-policy evaluation.

Latent transitions are modelled directly in latent space:

* encoder: z_0 ~ q(z_0 | s_0); h_t = f_enc(h_{t-1}, z_{t-1}, a_{t-1}, s_t);
  z_t ~ q(z_t | h_t)
* decoder: g_t = f_dec(g_{t-1}, z_{t-1}, a_{t-1}); z_t ~ p(z_t | g_t);
  s_t ~ p(s_t | z_t); r_{t-1} ~ p(r | z_t); r_end ~ p(r_end | z_T)

Every distribution is a diagonal Gaussian. During training the decoder's
recurrent state is rebuilt along the encoder's samples so that each step KL
compares two distributions conditioned on the same z_{t-1}.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .actor_critic import TrainingError
from .diffnum import (
    MLP,
    Adam,
    GaussianDiag,
    Module,
    Tape,
    Tensor,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_sample_reparam,
    make_cell,
    reshape,
    stack,
)
from .diffnum import checkpoint as ckpt
from .diffnum.gaussian import LOG_VAR_MAX, LOG_VAR_MIN
from .diffnum.tensor import ContractError, DimensionError
from .replay import ReplayBuffer, Trajectory


@dataclass
class DlsmConfig:
    state_dim: int = 10
    latent_dim: int = 16
    hidden: int = 32
    head_hidden: int = 32
    cell: str = "gru"
    lr: float = 1e-3
    batch_size: int = 8
    max_iter: int = 2000
    seed: int = 0
    normalize: bool = True
    clip_norm: float | None = 100.0
    end_reward_mode: str = "sample"

    def __post_init__(self):
        if self.end_reward_mode not in ("sample", "mean"):
            raise ValueError("end_reward_mode must be 'sample' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Normalizer:
    """Affine rescaling of states, per-step rewards and end rewards."""

    s_mean: float = 0.0
    s_std: float = 1.0
    r_mean: float = 0.0
    r_std: float = 1.0
    e_mean: float = 0.0
    e_std: float = 1.0

    @classmethod
    def fit(cls, trajs: list[Trajectory]) -> "Normalizer":
        s = np.concatenate([t.states.ravel() for t in trajs])
        r = np.concatenate([t.rewards for t in trajs])
        e = np.array([t.r_end for t in trajs])

        def spread(x):
            sd = float(x.std())
            return sd if sd > 1e-6 else 1.0

        return cls(float(s.mean()), spread(s), float(r.mean()), spread(r), float(e.mean()), spread(e))


def _head(in_dim: int, hidden: int, out_dim: int, rng, prefix: str) -> MLP:
    return MLP([in_dim, hidden, 2 * out_dim], ["tanh", "linear"], rng, prefix=prefix)


def _gauss(out: Tensor, k: int) -> GaussianDiag:
    return GaussianDiag.from_head(out[..., :k], out[..., k:])


class DlsmParams(Module):
    """Encoder (phi) and decoder (psi) networks; the z_0 prior is fixed N(0, I)."""

    def __init__(self, config: DlsmConfig, seed=None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        W, d, H, hh = config.state_dim, config.latent_dim, config.hidden, config.head_hidden
        self.enc_init = _head(W, hh, d, rng, "enc_init.")
        self.enc_cell = make_cell(config.cell, d + 1 + W, H, rng, "enc_cell.")
        self.enc_post = _head(self.enc_cell.state_size, hh, d, rng, "enc_post.")
        self.dec_cell = make_cell(config.cell, d + 1, H, rng, "dec_cell.")
        self.dec_trans = _head(self.dec_cell.state_size, hh, d, rng, "dec_trans.")
        self.dec_state = _head(d, hh, W, rng, "dec_state.")
        self.dec_reward = _head(d, hh, 1, rng, "dec_reward.")
        self.dec_end = _head(d, hh, 1, rng, "dec_end.")
        self.norm = Normalizer()

    def modules(self) -> list[Module]:
        return [self.enc_init, self.enc_cell, self.enc_post, self.dec_cell, self.dec_trans, self.dec_state, self.dec_reward, self.dec_end]

    def named_parameters(self):
        out = []
        for m in self.modules():
            out += m.named_parameters()
        return out

    def architecture(self) -> dict:
        c = self.config
        return {"kind": "dlsm", "state_dim": c.state_dim, "latent_dim": c.latent_dim, "hidden": c.hidden, "head_hidden": c.head_hidden, "cell": c.cell}

    def clone(self) -> "DlsmParams":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# encoding and the evidence lower bound


@dataclass
class Batch:
    states: np.ndarray  # (T+1, B, W), normalized
    actions: np.ndarray  # (T, B, 1)
    rewards: np.ndarray  # (T, B, 1), normalized
    r_end: np.ndarray  # (B, 1), normalized

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def size(self) -> int:
        return self.actions.shape[1]


def make_batch(params: DlsmParams, trajs: list[Trajectory]) -> Batch:
    lengths = {len(t) for t in trajs}
    if len(lengths) != 1:
        raise DimensionError(f"trajectories in one batch must share a length, got {sorted(lengths)}")
    W = params.config.state_dim
    for t in trajs:
        if t.states.shape[1] != W:
            raise DimensionError(f"session {t.session_id!r}: state width {t.states.shape[1]} != model width {W}")
        if t.r_end is None:
            raise ContractError(f"session {t.session_id!r} carries no end-of-session reward")
    n = params.norm
    states = (np.stack([t.states for t in trajs], axis=1) - n.s_mean) / n.s_std
    actions = np.stack([t.actions for t in trajs], axis=1)[..., None]
    rewards = ((np.stack([t.rewards for t in trajs], axis=1) - n.r_mean) / n.r_std)[..., None]
    r_end = ((np.array([t.r_end for t in trajs]) - n.e_mean) / n.e_std)[:, None]
    return Batch(states, actions, rewards, r_end)


@dataclass
class Encoding:
    z: Tensor  # (T+1, B, d) posterior samples
    posterior: GaussianDiag  # q(z_t | .) for t = 0..T, shape (T+1, B, d)
    transition: GaussianDiag  # p(z_t | z_{t-1}, a_{t-1}) for t = 1..T, shape (T, B, d)
    decoder_hidden: Tensor  # (T, B, H_dec)

    def steps(self):
        """Per-step (z_t, posterior_t, decoder transition_t); t = 0 pairs with the prior."""
        T1 = self.z.shape[0]
        d = self.z.shape[-1]
        for t in range(T1):
            post = GaussianDiag(self.posterior.mean[t], self.posterior.log_var[t])
            if t == 0:
                prior = GaussianDiag.standard(d, self.z.shape[1])
            else:
                prior = GaussianDiag(self.transition.mean[t - 1], self.transition.log_var[t - 1])
            yield self.z[t], post, prior


def _apply_head(head: MLP, x: Tensor, k: int) -> GaussianDiag:
    """Run a head over a (T, B, in) stack by flattening the leading axes."""
    lead = x.shape[:-1]
    out = head(reshape(x, (-1, x.shape[-1])))
    return _gauss(reshape(out, (*lead, 2 * k)), k)


def draw_noise(params: DlsmParams, horizon: int, batch: int, rng) -> np.ndarray:
    return np.random.default_rng(rng).standard_normal((horizon + 1, batch, params.config.latent_dim))


def encode_batch(params: DlsmParams, batch: Batch, noise: np.ndarray) -> Encoding:
    T, B = batch.horizon, batch.size
    d = params.config.latent_dim
    if noise.shape != (T + 1, B, d):
        raise DimensionError(f"noise shape {noise.shape} != {(T + 1, B, d)}")
    q0 = _gauss(params.enc_init(batch.states[0]), d)
    z = gaussian_sample_reparam(q0, noise[0])
    h_enc = Tensor(np.zeros((B, params.enc_cell.state_size)))
    h_dec = Tensor(np.zeros((B, params.dec_cell.state_size)))
    zs, means, log_vars, dec_hidden = [z], [q0.mean], [q0.log_var], []
    for t in range(1, T + 1):
        a_prev = batch.actions[t - 1]
        h_enc = params.enc_cell(h_enc, [z, a_prev, batch.states[t]])
        h_dec = params.dec_cell(h_dec, [z, a_prev])
        q_t = _gauss(params.enc_post(h_enc), d)
        z = gaussian_sample_reparam(q_t, noise[t])
        zs.append(z)
        means.append(q_t.mean)
        log_vars.append(q_t.log_var)
        dec_hidden.append(h_dec)
    hd = stack(dec_hidden)
    transition = _apply_head(params.dec_trans, hd, d)
    return Encoding(stack(zs), GaussianDiag(stack(means), stack(log_vars)), transition, hd)


def encode_trajectory(params: DlsmParams, trajectory: Trajectory, noise) -> list[tuple[np.ndarray, GaussianDiag, GaussianDiag]]:
    """Latent path of one trajectory: (z_t, posterior_t, matched decoder transition_t)."""
    batch = make_batch(params, [trajectory])
    if not isinstance(noise, np.ndarray):
        noise = draw_noise(params, batch.horizon, 1, noise)
    noise = noise.reshape(batch.horizon + 1, 1, params.config.latent_dim)
    enc = encode_batch(params, batch, noise)
    out = []
    for z, post, prior in enc.steps():
        out.append((z.data[0], GaussianDiag(post.mean.data[0], post.log_var.data[0]), GaussianDiag(prior.mean.data[0], prior.log_var.data[0])))
    return out


@dataclass
class ElboTerms:
    recon_state: Tensor
    recon_reward: Tensor
    recon_end: Tensor
    kl_init: Tensor
    kl_steps: Tensor

    @property
    def total(self) -> Tensor:
        return self.recon_state + self.recon_reward + self.recon_end - self.kl_init - self.kl_steps

    def mean(self) -> "ElboTerms":
        return ElboTerms(*(getattr(self, f).mean() for f in ("recon_state", "recon_reward", "recon_end", "kl_init", "kl_steps")))

    def as_floats(self) -> dict[str, float]:
        d = {f: float(np.mean(getattr(self, f).data)) for f in ("recon_state", "recon_reward", "recon_end", "kl_init", "kl_steps")}
        d["total"] = float(np.mean(self.total.data))
        return d


def elbo_batch(params: DlsmParams, batch: Batch, noise: np.ndarray) -> ElboTerms:
    """Per-trajectory ELBO terms, each a (B,) tensor."""
    d, W = params.config.latent_dim, params.config.state_dim
    enc = encode_batch(params, batch, noise)
    p_s = _apply_head(params.dec_state, enc.z, W)
    recon_state = gaussian_log_prob(p_s, batch.states).sum(axis=0)
    z_next = enc.z[1:]
    p_r = _apply_head(params.dec_reward, z_next, 1)
    recon_reward = gaussian_log_prob(p_r, batch.rewards).sum(axis=0)
    p_end = _gauss(params.dec_end(enc.z[-1]), 1)
    recon_end = gaussian_log_prob(p_end, batch.r_end)
    q0 = GaussianDiag(enc.posterior.mean[0], enc.posterior.log_var[0])
    kl_init = gaussian_kl(q0, GaussianDiag.standard(d, batch.size))
    q_rest = GaussianDiag(enc.posterior.mean[1:], enc.posterior.log_var[1:])
    kl_steps = gaussian_kl(q_rest, enc.transition).sum(axis=0)
    return ElboTerms(recon_state, recon_reward, recon_end, kl_init, kl_steps)


def elbo(params: DlsmParams, trajectory: Trajectory, noise) -> ElboTerms:
    """ELBO terms of a single trajectory as scalar tensors."""
    if trajectory.r_end is None:
        raise ContractError("trajectory carries no end-of-session reward")
    batch = make_batch(params, [trajectory])
    if not isinstance(noise, np.ndarray):
        noise = draw_noise(params, batch.horizon, 1, noise)
    noise = noise.reshape(batch.horizon + 1, 1, params.config.latent_dim)
    terms = elbo_batch(params, batch, noise)
    return ElboTerms(*(getattr(terms, f)[0] for f in ("recon_state", "recon_reward", "recon_end", "kl_init", "kl_steps")))


# ---------------------------------------------------------------------------
# training


@dataclass
class DlsmTrainResult:
    params: DlsmParams
    elbo_curve: list[float] = field(default_factory=list)


def _group_by_length(trajs: list[Trajectory]) -> list[list[Trajectory]]:
    groups: dict[int, list[Trajectory]] = {}
    for t in trajs:
        groups.setdefault(len(t), []).append(t)
    return [groups[k] for k in sorted(groups)]


def train(
    params: DlsmParams,
    buffer: ReplayBuffer,
    batch_size: int | None = None,
    lr: float | None = None,
    max_iter: int | None = None,
    seed=None,
) -> DlsmTrainResult:
    """Maximize the batch-mean ELBO with Adam; returns a trained copy."""
    cfg = params.config
    batch_size = cfg.batch_size if batch_size is None else batch_size
    lr = cfg.lr if lr is None else lr
    max_iter = cfg.max_iter if max_iter is None else max_iter
    if len(buffer) == 0:
        raise ValueError("buffer is empty")
    params = params.clone()
    if cfg.normalize:
        params.norm = Normalizer.fit(buffer.trajectories)
    batch_size = min(batch_size, len(buffer))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = Adam(params.parameters(), lr, clip_norm=cfg.clip_norm)
    curve = []
    for it in range(max_iter):
        picks = rng.choice(len(buffer), size=batch_size, replace=False)
        trajs = [buffer.trajectories[int(i)] for i in picks]
        with Tape() as tape:
            total = None
            for group in _group_by_length(trajs):
                batch = make_batch(params, group)
                noise = draw_noise(params, batch.horizon, batch.size, rng)
                s = elbo_batch(params, batch, noise).total.sum()
                total = s if total is None else total + s
            mean_elbo = total * (1.0 / batch_size)
            loss = -mean_elbo
        value = mean_elbo.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite ELBO at iteration {it}")
        tape.backward(loss)
        opt.step()
        curve.append(value)
    return DlsmTrainResult(params, curve)


def evaluate_elbo(params: DlsmParams, trajs: list[Trajectory], seed=0) -> float:
    rng = np.random.default_rng(seed)
    totals = []
    for group in _group_by_length(trajs):
        batch = make_batch(params, group)
        totals.append(elbo_batch(params, batch, draw_noise(params, batch.horizon, batch.size, rng)).total.data)
    return float(np.mean(np.concatenate(totals)))


# ---------------------------------------------------------------------------
# simulated rollouts


def _mlp_gauss_np(head: MLP, x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    out = head.predict(x)
    return out[..., :k], np.clip(out[..., k:], LOG_VAR_MIN, LOG_VAR_MAX)


def _policy_batch(policy) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(policy, "act_batch"):
        return policy.act_batch
    return lambda states: np.asarray([policy(s) for s in states], dtype=np.float64)


@dataclass
class RolloutResult:
    estimate: float
    returns: np.ndarray
    rewards: np.ndarray  # (M, T) per-step rewards in original units
    r_end: np.ndarray  # (M,)


def rollout(
    params: DlsmParams,
    policy,
    horizon: int,
    M: int,
    gamma: float,
    seed=0,
    end_reward_mode: str | None = None,
) -> RolloutResult:
    """Estimate the policy's return as the mean over M simulated sessions.

    Rollout ``i`` draws all its noise from a generator spawned from
    ``(seed, i)``, so its trajectory does not depend on M or on the order in
    which rollouts are computed.
    """
    if M < 1 or horizon < 1:
        raise ValueError("M and horizon must be at least 1")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    mode = end_reward_mode or params.config.end_reward_mode
    cfg, n = params.config, params.norm
    d, W, T = cfg.latent_dim, cfg.state_dim, horizon
    width = (T + 1) * d + (T + 1) * W + T + 1
    children = np.random.SeedSequence(seed).spawn(M)
    flat = np.stack([np.random.default_rng(c).standard_normal(width) for c in children])
    off = 0
    eps_z = flat[:, off : off + (T + 1) * d].reshape(M, T + 1, d)
    off += (T + 1) * d
    eps_s = flat[:, off : off + (T + 1) * W].reshape(M, T + 1, W)
    off += (T + 1) * W
    eps_r = flat[:, off : off + T]
    eps_end = flat[:, -1]

    act = _policy_batch(policy)
    z = eps_z[:, 0]  # prior N(0, I)
    mu, lv = _mlp_gauss_np(params.dec_state, z, W)
    s = (mu + np.exp(0.5 * lv) * eps_s[:, 0]) * n.s_std + n.s_mean
    h = np.zeros((M, params.dec_cell.state_size))
    rewards = np.zeros((M, T))
    for t in range(1, T + 1):
        a = np.clip(act(s), 0.0, 1.0).reshape(M, 1)
        h = params.dec_cell.step_numpy(h, np.concatenate([z, a], axis=-1))
        mu, lv = _mlp_gauss_np(params.dec_trans, h, d)
        z = mu + np.exp(0.5 * lv) * eps_z[:, t]
        mu, lv = _mlp_gauss_np(params.dec_state, z, W)
        s = (mu + np.exp(0.5 * lv) * eps_s[:, t]) * n.s_std + n.s_mean
        mu, lv = _mlp_gauss_np(params.dec_reward, z, 1)
        rewards[:, t - 1] = (mu[:, 0] + np.exp(0.5 * lv[:, 0]) * eps_r[:, t - 1]) * n.r_std + n.r_mean
    mu, lv = _mlp_gauss_np(params.dec_end, z, 1)
    r_end_n = mu[:, 0] if mode == "mean" else mu[:, 0] + np.exp(0.5 * lv[:, 0]) * eps_end
    r_end = r_end_n * n.e_std + n.e_mean
    discounts = gamma ** np.arange(T)
    returns = rewards @ discounts + r_end
    return RolloutResult(float(returns.mean()), returns, rewards, r_end)


def _log_normal(x, mean, log_var) -> np.ndarray:
    return -0.5 * np.sum(np.log(2.0 * np.pi) + log_var + (x - mean) ** 2 * np.exp(-log_var), axis=-1)


def marginal_log_likelihood(params: DlsmParams, trajectory: Trajectory, n_samples: int, seed=0, chunk: int = 100_000) -> tuple[float, float]:
    """Monte Carlo log p(states, rewards, r_end | actions) with ancestral latent samples.

    Works in the model's normalized units, like the ELBO. Returns the
    log-mean-exp estimate and its delta-method standard error.
    """
    b = make_batch(params, [trajectory])
    d, W, T = params.config.latent_dim, params.config.state_dim, b.horizon
    s, a, r, e = b.states[:, 0], b.actions[:, 0], b.rewards[:, 0], b.r_end[0]
    rng = np.random.default_rng(seed)
    logw = []
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        z = rng.standard_normal((m, d))
        lw = _log_normal(s[0], *_mlp_gauss_np(params.dec_state, z, W))
        h = np.zeros((m, params.dec_cell.state_size))
        for t in range(1, T + 1):
            h = params.dec_cell.step_numpy(h, np.concatenate([z, np.broadcast_to(a[t - 1], (m, 1))], axis=-1))
            mu, lv = _mlp_gauss_np(params.dec_trans, h, d)
            z = mu + np.exp(0.5 * lv) * rng.standard_normal((m, d))
            lw += _log_normal(s[t], *_mlp_gauss_np(params.dec_state, z, W))
            lw += _log_normal(r[t - 1], *_mlp_gauss_np(params.dec_reward, z, 1))
        lw += _log_normal(e, *_mlp_gauss_np(params.dec_end, z, 1))
        logw.append(lw)
    logw = np.concatenate(logw)
    top = logw.max()
    w = np.exp(logw - top)
    mean_w = w.mean()
    stderr = float(w.std(ddof=1) / (np.sqrt(len(w)) * mean_w))
    return float(top + np.log(mean_w)), stderr


# ---------------------------------------------------------------------------
# persistence


def save(path, params: DlsmParams, meta: dict | None = None) -> None:
    info = {"architecture": params.architecture(), "config": params.config.to_dict(), "normalizer": asdict(params.norm), **(meta or {})}
    ckpt.save(path, params.state_dict(), info)


def load(path) -> tuple[DlsmParams, dict]:
    tensors, meta = ckpt.load(path)
    if meta.get("architecture", {}).get("kind") != "dlsm":
        raise ckpt.CheckpointError(f"{path} is not a DLSM checkpoint")
    params = DlsmParams(DlsmConfig(**meta["config"]))
    params.load_state_dict(tensors)
    params.norm = Normalizer(**meta["normalizer"])
    return params, meta

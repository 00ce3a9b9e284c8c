import numpy as np
import pytest

from dbsrl import dlsm
from dbsrl.actor_critic import PolicyNet, behavior_policy_uniform
from dbsrl.diffnum.checkpoint import CheckpointError
from dbsrl.diffnum.tensor import DimensionError
from dbsrl.env import PatientProfile, run_session
from dbsrl.replay import ReplayBuffer

TINY = dict(latent_dim=3, hidden=6, head_hidden=8)


def buffer(n=6, horizon=8, B=0.0, base=0, window=10):
    buf = ReplayBuffer()
    for i in range(base, base + n):
        buf.append(run_session(behavior_policy_uniform(B, i), PatientProfile(), horizon, i, session_id=f"s{i:04d}", window=window))
    return buf


def pin_heads(params, c_r, c_e):
    for head, c in ((params.dec_reward, c_r), (params.dec_end, c_e)):
        head.weights[-1].data[:] = 0.0
        head.biases[-1].data[:] = [c, -10.0]


def test_pinned_heads_give_known_estimate():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, seed=1))
    pin_heads(params, -0.25, 40.0)
    gamma, T, M = 0.99, 30, 400
    res = dlsm.rollout(params, lambda s: 0.5, T, M, gamma, seed=3, end_reward_mode="mean")
    discounts = gamma ** np.arange(T)
    exact = -0.25 * discounts.sum() + 40.0
    se = np.exp(-5.0) * np.sqrt((discounts**2).sum() / M)
    assert abs(res.estimate - exact) < 5 * se
    np.testing.assert_array_equal(res.r_end, 40.0)
    assert res.rewards.shape == (M, T) and res.returns.shape == (M,)


def test_rollout_noise_is_per_rollout():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY))
    pol = PolicyNet(10, (4,), 0)
    small = dlsm.rollout(params, pol, 12, 5, 0.9, seed=7)
    big = dlsm.rollout(params, pol, 12, 20, 0.9, seed=7)
    np.testing.assert_array_equal(small.returns, big.returns[:5])
    again = dlsm.rollout(params, pol, 12, 20, 0.9, seed=7)
    assert again.estimate == big.estimate
    assert dlsm.rollout(params, pol, 12, 20, 0.9, seed=8).estimate != big.estimate


def test_rollout_accepts_plain_callable():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY))
    pol = PolicyNet(10, (4,), 0)
    a = dlsm.rollout(params, pol, 6, 4, 0.9, seed=0)
    b = dlsm.rollout(params, pol.act, 6, 4, 0.9, seed=0)
    np.testing.assert_allclose(a.returns, b.returns, rtol=1e-12)


def test_rollout_validation():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY))
    for kw in (dict(M=0), dict(horizon=0), dict(gamma=1.0)):
        args = dict(horizon=5, M=3, gamma=0.9) | kw
        with pytest.raises(ValueError):
            dlsm.rollout(params, lambda s: 0.5, **args)
    with pytest.raises(ValueError):
        dlsm.DlsmConfig(end_reward_mode="median")


def test_batched_elbo_matches_single_trajectory_elbo():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, normalize=False))
    trajs = buffer(3, 5).trajectories
    noise = np.random.default_rng(0).standard_normal((6, 3, 3))
    batched = dlsm.elbo_batch(params, dlsm.make_batch(params, trajs), noise).total.data
    single = [dlsm.elbo(params, t, noise[:, i]).total.item() for i, t in enumerate(trajs)]
    np.testing.assert_allclose(batched, single, rtol=1e-12)


def test_make_batch_rejects_mixed_lengths_and_widths():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY))
    a, b = buffer(1, 5).trajectories[0], buffer(1, 6, base=9).trajectories[0]
    with pytest.raises(DimensionError):
        dlsm.make_batch(params, [a, b])
    narrow = buffer(1, 5, window=4).trajectories[0]
    with pytest.raises(DimensionError):
        dlsm.make_batch(params, [narrow])
    with pytest.raises(DimensionError):
        dlsm.encode_batch(params, dlsm.make_batch(params, [a]), np.zeros((3, 1, 3)))


def test_normalizer_fit():
    buf = buffer(4, 6)
    n = dlsm.Normalizer.fit(buf.trajectories)
    s = np.concatenate([t.states.ravel() for t in buf])
    assert n.s_mean == pytest.approx(s.mean()) and n.s_std == pytest.approx(s.std())
    flat = dlsm.Normalizer.fit([buf.trajectories[0]])
    assert flat.e_std == 1.0  # single end reward has no spread


def test_training_improves_elbo_and_is_deterministic():
    buf = buffer(8, 6)
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, batch_size=4))
    res = dlsm.train(params, buf, max_iter=120, seed=0)
    again = dlsm.train(params, buf, max_iter=120, seed=0)
    assert res.elbo_curve == again.elbo_curve
    assert np.mean(res.elbo_curve[-20:]) > np.mean(res.elbo_curve[:20])
    # the input parameters are not mutated
    for (k, v), w in zip(params.state_dict().items(), dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, batch_size=4)).state_dict().values()):
        np.testing.assert_array_equal(v, w)


def test_evaluate_elbo_handles_mixed_lengths():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY))
    trajs = buffer(2, 4).trajectories + buffer(2, 7, base=50).trajectories
    assert np.isfinite(dlsm.evaluate_elbo(params, trajs))


def test_elbo_below_marginal_likelihood():
    cfg = dlsm.DlsmConfig(state_dim=1, latent_dim=1, hidden=4, head_hidden=8)
    buf = buffer(10, 1, window=1)
    params = dlsm.train(dlsm.DlsmParams(cfg), buf, max_iter=60, seed=0).params
    tr = buf.trajectories[0]
    noise = np.random.default_rng(1).standard_normal((2, 2000, 1))
    elbo = dlsm.elbo_batch(params, dlsm.make_batch(params, [tr] * 2000), noise).total.data
    logp, se = dlsm.marginal_log_likelihood(params, tr, 200_000, seed=2)
    assert elbo.mean() <= logp + 3 * se + 3 * elbo.std() / np.sqrt(elbo.size)


def test_checkpoint_round_trip(tmp_path):
    buf = buffer(4, 5)
    params = dlsm.train(dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, cell="lstm")), buf, max_iter=3).params
    path = tmp_path / "m.ckpt"
    dlsm.save(path, params, {"tag": 1})
    back, meta = dlsm.load(path)
    assert meta["tag"] == 1 and back.norm == params.norm and back.config == params.config
    a = dlsm.rollout(params, lambda s: 0.3, 5, 6, 0.9, seed=1)
    b = dlsm.rollout(back, lambda s: 0.3, 5, 6, 0.9, seed=1)
    np.testing.assert_array_equal(a.returns, b.returns)


def test_load_rejects_policy_checkpoint(tmp_path):
    from dbsrl.actor_critic import save_agent

    save_agent(tmp_path / "p.ckpt", PolicyNet(10, (3,), 0))
    with pytest.raises(CheckpointError):
        dlsm.load(tmp_path / "p.ckpt")


def test_reward_is_decoded_from_successor_latent():
    params = dlsm.DlsmParams(dlsm.DlsmConfig(**TINY, normalize=False))
    tr = buffer(1, 3).trajectories[0]
    batch = dlsm.make_batch(params, [tr])
    noise = np.random.default_rng(0).standard_normal((4, 1, 3))
    enc = dlsm.encode_batch(params, batch, noise)
    terms = dlsm.elbo_batch(params, batch, noise)
    manual = 0.0
    for t in range(1, 4):
        mu, lv = dlsm._mlp_gauss_np(params.dec_reward, enc.z.data[t], 1)
        manual += dlsm._log_normal(batch.rewards[t - 1], mu, lv)[0]
    assert terms.recon_reward.data[0] == pytest.approx(manual, rel=1e-12)
    # z_T's noise reaches the reward term only if r_{T-1} is decoded from z_T
    bumped = noise.copy()
    bumped[3] += 1.0
    moved = dlsm.elbo_batch(params, batch, bumped)
    assert moved.recon_reward.data[0] != terms.recon_reward.data[0]
    assert moved.recon_state.data[0] != terms.recon_state.data[0]

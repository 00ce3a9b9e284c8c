import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbsrl import actor_critic as ac
from dbsrl.actor_critic import CriticNet, PolicyNet, TrainConfig, TrainingError, behavior_policy_uniform, train_offline
from dbsrl.diffnum import Adam
from dbsrl.diffnum.gradcheck import check_gradients
from dbsrl.env import PatientProfile, run_session
from dbsrl.replay import ReplayBuffer

SMALL = (16, 12)


def random_buffer(n=12, B=0.0, profile=None, horizon=40):
    profile = profile or PatientProfile()
    buf = ReplayBuffer()
    for i in range(n):
        buf.append(run_session(behavior_policy_uniform(B, i), profile, horizon, i, session_id=f"s{i:03d}", controller_id="random"))
    return buf


_POLICY = PolicyNet(10, SMALL, seed=0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 10), elements=st.floats(-1e6, 1e6)))
def test_policy_output_in_unit_interval(states):
    out = _POLICY.act_batch(states)
    assert out.shape == (3,)
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_policy_rejects_wrong_width():
    with pytest.raises(ValueError):
        _POLICY.act(np.zeros(7))


def test_behavior_policy_range_and_validation():
    pol = behavior_policy_uniform(0.4, 1)
    draws = np.array([pol(None) for _ in range(5000)])
    assert draws.min() >= 0.4 and draws.max() <= 1.0
    assert abs(draws.mean() - 0.7) < 0.01
    with pytest.raises(ValueError):
        behavior_policy_uniform(1.0)
    with pytest.raises(ValueError):
        behavior_policy_uniform(-0.1)


def test_actor_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    actor, critic = PolicyNet(4, (5,), 1), CriticNet(4, (6,), 2)
    s = rng.standard_normal((7, 4))

    def build():
        return -critic(s, actor(s)).mean()

    assert check_gradients(build, actor.parameters()) < 1e-4


def test_actor_step_leaves_critic_untouched():
    rng = np.random.default_rng(0)
    actor, critic = PolicyNet(4, (5,), 1), CriticNet(4, (6,), 2)
    before_c, before_a = critic.state_dict(), actor.state_dict()
    ac.actor_step(actor, critic, Adam(actor.parameters(), 1e-2), rng.standard_normal((8, 4)))
    for k, v in critic.state_dict().items():
        np.testing.assert_array_equal(v, before_c[k])
    assert any(not np.array_equal(v, before_a[k]) for k, v in actor.state_dict().items())
    assert all(p.requires_grad for p in critic.parameters())


def test_soft_update_extremes():
    a, b = PolicyNet(3, (4,), 0), PolicyNet(3, (4,), 1)
    keep = a.state_dict()
    ac.soft_update(a, b, 0.0)
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, keep[k])
    ac.soft_update(a, b, 0.25)
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        np.testing.assert_allclose(v, 0.75 * keep[k] + 0.25 * w, rtol=1e-15)
    ac.soft_update(a, b, 1.0)
    for v, w in zip(a.state_dict().values(), b.state_dict().values()):
        np.testing.assert_array_equal(v, w)


def test_config_validation_and_lr_warnings():
    assert TrainConfig().lr_warnings() == []
    assert len(TrainConfig(actor_lr=1e-2).lr_warnings()) == 1
    assert len(TrainConfig(mode="finetune").lr_warnings()) == 2
    assert TrainConfig(mode="finetune", actor_lr=1e-6, critic_lr=1e-6).lr_warnings() == []
    for bad in (dict(tau=1.5), dict(gamma=1.0), dict(mode="x"), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_training_deterministic():
    buf = random_buffer(4, horizon=20)
    cfg = TrainConfig(steps=15, hidden=SMALL, seed=5)
    a1, c1, log1 = train_offline(buf, cfg)
    a2, c2, log2 = train_offline(buf, cfg)
    assert log1.critic_loss == log2.critic_loss
    for v, w in zip(a1.state_dict().values(), a2.state_dict().values()):
        np.testing.assert_array_equal(v, w)
    assert len(list(log1.rows())) == 15


def test_learns_to_save_energy_when_suppression_is_impossible():
    # with negligible suppression every step is in the high-beta branch, so reward = r_b - C1 a
    buf = random_buffer(10, profile=PatientProfile(suppression_gain=1e-3))
    actor, _, _ = train_offline(buf, TrainConfig(steps=1500, hidden=SMALL, seed=0, actor_lr=1e-3, log_every=0))
    assert actor.act_batch(buf.flat_arrays()["s"]).mean() < 0.2


def test_finetune_with_zero_lr_keeps_source_and_copies():
    buf = random_buffer(3, horizon=10)
    src = PolicyNet(10, SMALL, 7)
    keep = src.state_dict()
    cfg = TrainConfig(steps=5, hidden=SMALL, actor_lr=0.0, critic_lr=0.0, mode="finetune", log_every=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out, _, _ = train_offline(buf, cfg, actor=src)
    assert out is not src
    for k, v in out.state_dict().items():
        np.testing.assert_array_equal(v, keep[k])


def test_lr_outside_range_warns():
    buf = random_buffer(2, horizon=5)
    with pytest.warns(UserWarning, match="actor_lr"):
        train_offline(buf, TrainConfig(steps=1, hidden=SMALL, actor_lr=0.5))


def test_non_finite_loss_raises(monkeypatch):
    buf = random_buffer(2, horizon=5)
    monkeypatch.setattr(ac, "critic_step", lambda *a, **k: float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        train_offline(buf, TrainConfig(steps=3, hidden=SMALL))


def test_agent_checkpoint_round_trip(tmp_path):
    actor, critic = PolicyNet(10, SMALL, 1), CriticNet(10, SMALL, 2)
    path = tmp_path / "agent.ckpt"
    ac.save_agent(path, actor, critic, {"note": "x"})
    a2, c2, meta = ac.load_agent(path)
    s = np.random.default_rng(0).standard_normal((5, 10))
    np.testing.assert_array_equal(actor.act_batch(s), a2.act_batch(s))
    np.testing.assert_array_equal(critic.predict(s, np.full(5, 0.3)), c2.predict(s, np.full(5, 0.3)))
    assert meta["note"] == "x"
    p3, _ = ac.load_policy(path)
    np.testing.assert_array_equal(actor.act_batch(s), p3.act_batch(s))


def test_zero_final_layer_gives_half_and_sigmoid_saturates():
    pol = PolicyNet(10, SMALL, 0, zero_final=True)
    np.testing.assert_array_equal(pol.act_batch(np.random.default_rng(0).standard_normal((50, 10))), 0.5)
    for bias, want in ((50.0, 1.0), (-50.0, 0.0)):
        pol.net.biases[-1].data[:] = bias
        assert pol.act(np.zeros(10)) == pytest.approx(want, abs=1e-15)


def test_actor_step_increases_batch_q():
    rng = np.random.default_rng(1)
    actor, critic = PolicyNet(4, (8,), 1), CriticNet(4, (8,), 2)
    s = rng.standard_normal((16, 4))
    before = critic.predict(s, actor.act_batch(s)).mean()
    ac.actor_step(actor, critic, Adam(actor.parameters(), 1e-6), s)
    assert critic.predict(s, actor.act_batch(s)).mean() > before


def test_single_transition_zero_gamma_critic_learns_reward():
    buf = random_buffer(1, horizon=1)
    _, critic, _ = train_offline(buf, TrainConfig(steps=2000, hidden=SMALL, gamma=0.0, critic_lr=1e-3, log_every=0))
    tr = buf.transition(0)
    assert abs(critic.predict(tr.state[None], np.array([tr.action]))[0] - tr.reward) < 1e-2


def test_td_fixed_point_matches_value_iteration():
    # states one-hot in R^2, actions {0, 1}; s' = a, r = [[1, 0], [0, 2]][s][a]; target policy pi(s) = 1 - s
    gamma = 0.5
    R = np.array([[1.0, 0.0], [0.0, 2.0]])
    pi = [1, 0]
    Q = np.zeros((2, 2))
    for _ in range(200):
        Q = R + gamma * np.array([[Q[a, pi[a]] for a in (0, 1)] for _ in (0, 1)])
    eye = np.eye(2)
    S = np.array([eye[s] for s in (0, 0, 1, 1)])
    A = np.array([0.0, 1.0, 0.0, 1.0])
    S2 = np.array([eye[int(a)] for a in A])
    A2 = np.array([pi[int(a)] for a in A], dtype=float)
    r = np.array([R[s, int(a)] for s, a in zip((0, 0, 1, 1), A)])
    critic = CriticNet(2, (32,), 0)
    opt = Adam(critic.parameters(), 3e-3)
    for _ in range(4000):
        ac.critic_step(critic, opt, S, A, r + gamma * critic.predict(S2, A2))
    np.testing.assert_allclose(critic.predict(S, A), [Q[0, 0], Q[0, 1], Q[1, 0], Q[1, 1]], atol=1e-2)

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dbsrl import ope
from dbsrl.actor_critic import PolicyNet, behavior_policy_uniform
from dbsrl.env import PatientProfile, run_session
from dbsrl.ope import PolicyEvalRecord, SmoothedTarget, UniformBehavior, importance_sampling
from dbsrl.rewards import discounted_return


def sessions(n, B=0.0, horizon=6):
    return [run_session(behavior_policy_uniform(B, i), PatientProfile(), horizon, i, session_id=f"s{i}") for i in range(n)]


def test_uniform_behavior_density():
    b = UniformBehavior(0.2)
    assert b(None, 0.5) == pytest.approx(1.25)
    assert b(None, 0.1) == 0.0 and b(None, 1.01) == 0.0
    assert integrate.quad(lambda a: b(None, a), 0, 1, points=[0.2])[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        UniformBehavior(1.0)


@pytest.mark.parametrize("center", [0.0, 0.03, 0.5, 0.97, 1.0])
def test_smoothed_target_is_a_density_on_unit_interval(center):
    t = SmoothedTarget(lambda s: center, 0.1)
    assert integrate.quad(lambda a: t(None, a), 0, 1, points=[center])[0] == pytest.approx(1.0, abs=1e-8)
    assert t(None, -0.01) == 0.0 and t(None, 1.2) == 0.0


def test_vectorized_target_densities_match_scalar():
    pol = PolicyNet(10, (5,), 0)
    t = SmoothedTarget(pol, 0.1)
    rng = np.random.default_rng(0)
    s, a = rng.standard_normal((20, 10)), rng.uniform(-0.1, 1.1, 20)
    np.testing.assert_allclose(t.densities(s, a), [t.density(x, y) for x, y in zip(s, a)], rtol=1e-12)


def test_is_enumeration_oracle():
    # two actions per step over two steps: enumerate every action sequence
    acts = (0.2, 0.8)
    b_prob = {0.2: 0.5, 0.8: 0.5}
    q_prob = {0.2: 0.1, 0.8: 0.9}
    behavior = lambda s, a: b_prob[round(a, 6)]
    target = lambda s, a: q_prob[round(a, 6)]
    trajs, p_b, p_q = [], [], []
    for k, seq in enumerate(itertools.product(acts, repeat=2)):
        it = iter(seq)
        trajs.append(run_session(lambda s: next(it), PatientProfile(), 2, 0, session_id=f"e{k}"))
        p_b.append(math.prod(b_prob[a] for a in seq))
        p_q.append(math.prod(q_prob[a] for a in seq))
    truth = sum(q * discounted_return(t.rewards, t.gamma, t.r_end) for q, t in zip(p_q, trajs))
    plain = importance_sampling(trajs, target, behavior, self_normalized=False, probabilities=p_b)
    assert plain.estimate == pytest.approx(truth, rel=1e-12)
    # behavior probabilities sum to 1, so the normalized estimate agrees
    assert importance_sampling(trajs, target, behavior, probabilities=p_b).estimate == pytest.approx(truth, rel=1e-12)


def test_is_target_equal_behavior_gives_sample_mean():
    trajs = sessions(10)
    res = importance_sampling(trajs, UniformBehavior(0.0), UniformBehavior(0.0))
    assert res.estimate == pytest.approx(np.mean(res.returns), rel=1e-12)
    np.testing.assert_allclose(res.weights, 0.1)


def test_is_invariances():
    trajs = sessions(12)
    target = SmoothedTarget(lambda s: 0.6, 0.3)
    base = importance_sampling(trajs, target, UniformBehavior(0.0)).estimate
    scaled = importance_sampling(trajs, target, lambda s, a: 7.0).estimate
    assert scaled == pytest.approx(base, rel=1e-10)
    perm = importance_sampling(trajs[::-1], target, UniformBehavior(0.0)).estimate
    assert perm == pytest.approx(base, rel=1e-12)


def test_long_sessions_do_not_underflow():
    trajs = sessions(5, horizon=150)
    res = importance_sampling(trajs, SmoothedTarget(lambda s: 0.5, 0.1), UniformBehavior(0.0))
    assert np.isfinite(res.estimate)
    assert res.weights.sum() == pytest.approx(1.0)


def test_unsupported_actions_and_all_zero():
    trajs = sessions(4, B=0.0)
    res = importance_sampling(trajs, SmoothedTarget(lambda s: 0.5), UniformBehavior(0.9))
    assert res.unsupported == 4
    assert math.isnan(res.estimate)
    with pytest.raises(ValueError):
        importance_sampling([], UniformBehavior(0.0), UniformBehavior(0.0))


def test_spearman_known_values():
    assert ope.spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == pytest.approx(0.8)
    assert ope.spearman([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0)
    assert math.isnan(ope.spearman([1, 2, 3], [4, 4, 4]))
    x, y = np.random.default_rng(0).standard_normal((2, 30))
    assert ope.spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-100, 100), min_size=3, max_size=10, unique=True))
def test_spearman_invariant_under_monotone_transform(xs):
    y = np.random.default_rng(len(xs)).permutation(len(xs))
    assert ope.spearman(xs, y) == pytest.approx(ope.spearman(np.exp(np.asarray(xs) / 50), y), abs=1e-12)


def test_regret_and_mae():
    recs = [PolicyEvalRecord("a", 10.0, {"m": 1.0}), PolicyEvalRecord("b", 8.0, {"m": 3.0}), PolicyEvalRecord("c", 5.0, {"m": 2.0})]
    assert ope.regret_at_1(recs, "m") == pytest.approx(0.2)
    assert ope.rank_correlation(recs, "m") == pytest.approx(-0.5)
    recs[0].estimates["m"] = 9.0
    assert ope.regret_at_1(recs, "m") == 0.0
    with pytest.raises(ZeroDivisionError):
        ope.regret_at_1([PolicyEvalRecord("z", 0.0, {"m": 1.0})], "m")
    assert ope.mae(3.0, 5.5) == 2.5


def brute_force_p(a, b):
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    n, N = len(a), len(pooled)
    center = n * (N + 1) / 2
    obs = abs(ranks[:n].sum() - center)
    hits = total = 0
    for idx in itertools.combinations(range(N), n):
        total += 1
        hits += abs(ranks[list(idx)].sum() - center) >= obs - 1e-9
    return hits / total


@pytest.mark.parametrize("seed", range(6))
def test_exact_rank_sum_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    a = rng.integers(0, 5, n).astype(float)  # small integer range forces ties
    b = rng.integers(1, 6, m).astype(float)
    res = ope.wilcoxon_rank_sum(a, b)
    assert res.exact
    assert res.p_value == pytest.approx(brute_force_p(a, b), rel=1e-12)


def test_exact_rank_sum_matches_scipy_without_ties():
    a, b = [1.1, 2.3, 0.4, 5.0, 3.3], [6.1, 7.2, 4.4, 8.0, 9.9, 2.2]
    res = ope.wilcoxon_rank_sum(a, b)
    ref = stats.mannwhitneyu(a, b, method="exact")
    assert res.U == ref.statistic
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-12)


def test_normal_approximation_matches_scipy():
    rng = np.random.default_rng(4)
    a, b = np.round(rng.normal(0, 1, 30), 1), np.round(rng.normal(0.5, 1, 25), 1)
    res = ope.wilcoxon_rank_sum(a, b)
    ref = stats.mannwhitneyu(a, b, method="asymptotic", use_continuity=False)
    assert not res.exact
    assert res.U == ref.statistic
    assert res.p_value == pytest.approx(ref.pvalue, rel=1e-10)


def test_rank_sum_degenerate_cases():
    assert ope.wilcoxon_rank_sum([1.0] * 30, [1.0] * 30).p_value == 1.0
    assert ope.wilcoxon_rank_sum([2.0, 2.0], [2.0]).p_value == 1.0
    with pytest.raises(ValueError):
        ope.wilcoxon_rank_sum([], [1.0])

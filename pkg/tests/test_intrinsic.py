import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sipo import approximator as ap
from sipo import intrinsic as it


def test_rbf_identical_state():
    s = np.array([0.2, 0.4])
    assert it.rbf_reward(s, np.array([s]), 0.02, 10) == pytest.approx(-0.1, abs=1e-15)


def test_rbf_far_state_vanishes():
    r = it.rbf_reward(np.zeros(2), np.array([[100.0, 0.0]]), 0.02, 10)
    assert r <= 0 and r > -1e-300


def test_rbf_worked_value():
    r = it.rbf_reward(np.zeros(2), np.array([[1.0, 0.0]]), 0.02, 10)
    assert r == pytest.approx(-0.1 * math.exp(-1 / 0.04), rel=1e-12)
    assert r == pytest.approx(-1.39e-12, rel=1e-2)


@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4), st.integers(1, 20))
def test_rbf_range(s, h):
    cloud = np.random.default_rng(0).normal(size=(10, 4))
    r = it.rbf_reward(np.array(s), cloud, 0.02, h)
    assert -1.0 / h <= r <= 0.0


@given(st.floats(0, 3), st.floats(0, 3))
def test_rbf_monotone_in_distance(d1, d2):
    lo, hi = sorted([d1, d2])
    ref = np.array([[0.0, 0.0]])
    assert it.rbf_reward(np.array([lo, 0.0]), ref, 0.5, 5) <= it.rbf_reward(np.array([hi, 0.0]), ref, 0.5, 5)


def test_rbf_errors():
    with pytest.raises(ValueError):
        it.rbf_reward(np.zeros(2), np.zeros((0, 2)), 0.02, 10)
    with pytest.raises(ValueError):
        it.rbf_reward(np.zeros(2), np.zeros((3, 3)), 0.02, 10)
    with pytest.raises(ValueError):
        it.rbf_reward(np.zeros(2), np.zeros((3, 2)), 0.0, 10)


def test_rbf_batch_matches_single():
    rng = np.random.default_rng(1)
    q, c = rng.normal(size=(5, 8)), rng.normal(size=(20, 8))
    batch = it.rbf_reward(q, c, 0.3, 7)
    assert np.allclose(batch, [it.rbf_reward(x, c, 0.3, 7) for x in q], atol=1e-16)


# ---------------------------------------------------------------- WD


def const_net(dim, c):
    net = ap.DenseNet.create([dim, 4, 1], np.random.default_rng(0), activation="relu")
    net.set_flat(np.zeros(net.n_params))
    net.biases[-1][:] = c
    return net


def test_wd_constant_critic_zero():
    r = it.wd_reward(np.ones(3), np.random.default_rng(0).normal(size=(5, 3)), const_net(3, 0.007), 10)
    assert r == pytest.approx(0.0, abs=1e-18)


def test_wd_singleton_self_zero(rng):
    critic = it.make_critic(3, rng)
    s = np.array([0.1, 0.2, 0.3])
    assert it.wd_reward(s, np.array([s]), critic, 10) == pytest.approx(0.0, abs=1e-18)


def test_wd_forward_oracle(rng):
    critic = it.make_critic(2, rng)
    s, cloud = np.array([0.3, -0.4]), rng.normal(size=(3, 2))

    def f(x):
        h = x
        for k, (w, b) in enumerate(zip(critic.weights, critic.biases)):
            h = h @ w + b
            if k < len(critic.weights) - 1:
                h = np.maximum(h, 0)
        return h[0]

    expect = (f(s) - np.mean([f(x) for x in cloud])) / 10
    assert it.wd_reward(s, cloud, critic, 10) == pytest.approx(expect, abs=1e-15)


def test_critic_update_zero_rate(rng):
    critic = it.make_critic(3, rng)
    new = it.critic_update(critic, rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), 0.0)
    assert np.array_equal(new.get_flat(), critic.get_flat())


def test_critic_update_linear_closed_form():
    net = ap.DenseNet([3, 1], [np.zeros((3, 1))], [np.zeros(1)], [])
    cur = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    old = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, -0.003]])
    lr = 0.01
    new = it.critic_update(net, cur, old, lr)
    pre_clip = lr * (cur.mean(0) - old.mean(0))
    assert np.allclose(new.weights[0][:, 0], np.clip(pre_clip, -0.01, 0.01), atol=1e-18)
    assert np.array_equal(net.weights[0], np.zeros((3, 1)))  # input untouched


@given(st.integers(0, 1000), st.floats(0.0, 10.0), st.integers(1, 6))
def test_critic_stays_in_clip_box(seed, lr, steps):
    rng = np.random.default_rng(seed)
    critic = it.make_critic(4, rng)
    for _ in range(steps):
        critic = it.critic_update(critic, rng.normal(size=(8, 4)) * 5, rng.normal(size=(8, 4)), lr)
        assert max(np.abs(p).max() for p in critic.params()) <= it.CRITIC_CLIP


def test_critic_update_rejects_empty(rng):
    with pytest.raises(ValueError):
        it.critic_update(it.make_critic(2, rng), np.zeros((0, 2)), np.zeros((3, 2)), 0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_critic_update_nonfinite(rng):
    critic = it.make_critic(2, rng)
    with pytest.raises(ap.NonFiniteError):
        it.critic_update(critic, np.array([[np.inf, 0.0]]), np.zeros((3, 2)), 0.1)


# ---------------------------------------------------------------- final-l2


def test_final_l2():
    r = it.final_l2_reward(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 2.0]]))
    assert r == pytest.approx([(1.0 + 4.0) / 2])


# ---------------------------------------------------------------- combine


def test_combine_rewards():
    assert it.combine_rewards(1.0, [(2.0, -0.1), (1.0, 0.2)], 0.5) == pytest.approx(1.0)
    assert it.combine_rewards(0.3, [(2.0, 5.0)], 0.0) == 0.3
    assert it.combine_rewards(0.3, [(0.0, 5.0), (0.0, -1.0)], 2.0) == 0.3
    with pytest.raises(ValueError):
        it.combine_rewards(0.0, [(-1.0, 1.0)], 1.0)


# ---------------------------------------------------------------- normaliser


def test_normalizer_zero_stream():
    n = it.RunningNormalizer(0.99)
    assert np.all(n(np.zeros(100)) == 0)


def test_normalizer_scale_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=5000)
    a, b = it.RunningNormalizer(0.9), it.RunningNormalizer(0.9)
    a(x), b(7.0 * x)
    y = rng.normal(size=10)
    a.frozen = b.frozen = True
    assert np.allclose(a(y), b(7.0 * y), rtol=1e-9)


def test_normalizer_unit_variance():
    # with no discounting the return estimate is the reward itself
    x = np.random.default_rng(1).normal(size=10_000)
    n = it.RunningNormalizer(0.0)
    n(x)
    n.frozen = True
    assert abs(np.var(n(x)) - 1.0) < 0.1


def test_normalizer_frozen_statistics():
    n = it.RunningNormalizer(0.9)
    n(np.random.default_rng(2).normal(size=200))
    n.frozen = True
    before = (n.count, n.mean, n.m2)
    n(np.ones(50))
    assert (n.count, n.mean, n.m2) == before


# ---------------------------------------------------------------- stacking


def test_stack_repeats_first_state():
    snaps = np.arange(10, dtype=float).reshape(5, 2)
    s = it.stack_episode(snaps)
    assert s.shape == (5, 8)
    assert np.array_equal(s[0], np.tile(snaps[0], 4))
    assert np.array_equal(s[2], np.concatenate([snaps[0], snaps[0], snaps[1], snaps[2]]))
    assert np.array_equal(s[4], snaps[1:5].ravel())


def test_frame_stacker_matches_offline():
    snaps = np.random.default_rng(0).normal(size=(9, 3))
    st_ = it.FrameStacker(3)
    online = [st_.reset(snaps[0])] + [st_.push(x) for x in snaps[1:]]
    assert np.array_equal(np.array(online), it.stack_episode(snaps))


# ---------------------------------------------------------------- archive


def make_archive(rng, n_pol=3, d=2):
    arch = it.Archive(max_points=50, seed=4)
    for j in range(n_pol):
        eps = [it.stack_episode(rng.normal(size=(int(rng.integers(3, 12)), d))) for _ in range(4)]
        critic = it.make_critic(it.STACK * d, rng) if j % 2 == 0 else None
        arch.add(eps, critic=critic)
    return arch


def test_archive_round_trip(rng, tmp_path):
    arch = make_archive(rng)
    arch.save(str(tmp_path))
    back = it.Archive.load(str(tmp_path))
    assert len(back) == len(arch)
    for a, b in zip(arch.entries, back.entries):
        assert a.policy_index == b.policy_index
        assert np.array_equal(a.stacked, b.stacked)
        assert np.array_equal(a.episodes, b.episodes) and np.array_equal(a.timesteps, b.timesteps)
        assert np.array_equal(a.cloud.points, b.cloud.points)
        assert np.array_equal(a.finals, b.finals)
        assert (a.critic is None) == (b.critic is None)
        if a.critic is not None:
            assert ap.dumps(a.critic) == ap.dumps(b.critic)


def test_archive_invariants(rng):
    arch = make_archive(rng)
    assert [e.policy_index for e in arch.entries] == [0, 1, 2]
    for e in arch.entries:
        assert e.stacked.shape[1] == it.STACK * 2
        assert len(e.cloud) <= 50
    with pytest.raises(ValueError):
        arch.add([np.zeros((3, 8))], policy_index=1)
    with pytest.raises(ValueError):
        arch.add([np.zeros((3, 8)), np.zeros((3, 4))])


def test_archive_finals_are_last_states():
    arch = it.Archive()
    e1 = it.stack_episode(np.array([[0.0, 0.0], [1.0, 1.0]]))
    e2 = it.stack_episode(np.array([[0.0, 0.0], [2.0, 0.0], [3.0, 3.0]]))
    entry = arch.add([e1, e2])
    assert np.array_equal(entry.finals, [[1.0, 1.0], [3.0, 3.0]])


# ---------------------------------------------------------------- model


def test_intrinsic_return_is_episode_sum(rng):
    """The per-step rewards of an episode add up to the distance estimate."""
    ref = make_archive(rng, 1).entries[0]
    ep = it.stack_episode(rng.normal(size=(8, 2)))
    model = it.IntrinsicModel(it.IntrinsicConfig("rbf"), [ref], horizon=8)
    mask = np.zeros(8, dtype=bool)
    mask[-1] = True
    r = model.rewards(ep, mask, 2)
    estimate = -np.mean([np.exp(-((s - ref.cloud.points) ** 2).sum(1) / 0.04).mean() for s in ep])
    assert r[0].sum() == pytest.approx(estimate, rel=1e-12)
    model = it.IntrinsicModel(it.IntrinsicConfig("final-l2"), [ref], horizon=8)
    r = model.rewards(ep, mask, 2)
    assert np.count_nonzero(r[0][:-1]) == 0
    assert r[0].sum() == pytest.approx(it.final_l2_reward(ep[-1:, -2:], ref.finals)[0])


def test_config_validation():
    with pytest.raises(ValueError):
        it.IntrinsicConfig(variant="mmd")
    with pytest.raises(ValueError):
        it.IntrinsicConfig(sigma2=0.0)
    assert it.IntrinsicConfig().sigma2 == 0.02

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sipo import approximator as ap
from sipo import intrinsic as it
from sipo import trainer as tr
from conftest import finite_diff, rel_err
from test_kernels import gae_oracle

GRID = tr.EnvSetup("gridworld", grid_size=3)


def tiny(**kw):
    base = dict(gamma=0.99, entropy=0.01, batch_size=240, n_envs=4, steps=480, epochs=2, minibatches=2,
                population=2, eval_episodes=4, hidden=16, delta=-0.01,
                intrinsic=it.IntrinsicConfig("rbf", alpha=5.0))
    base.update(kw)
    return tr.TrainerConfig(**base)


# ---------------------------------------------------------------- GAE


def test_gae_zero():
    a, r = tr.compute_gae(np.zeros(5), np.zeros(5), np.zeros(5), np.eye(5)[4], 0.99, 0.95)
    assert np.all(a == 0) and np.all(r == 0)


def test_gae_single_step():
    a, ret = tr.compute_gae([2.0], [0.5], [0.0], [1], 0.99, 0.95)
    assert a[0] == 1.5 and ret[0] == 2.0


def test_gae_direct_sum_five_steps():
    rng = np.random.default_rng(3)
    r, v = rng.normal(size=(2, 5))
    nv = np.append(v[1:], 0.0)
    ends = np.array([0, 0, 0, 0, 1])
    a, _ = tr.compute_gae(r, v, nv, ends, 0.997, 0.95)
    assert np.max(np.abs(a - gae_oracle(r, v, nv, ends, 0.997, 0.95))) < 1e-10


def test_gae_lambda_one_is_discounted_return():
    rng = np.random.default_rng(4)
    r, v = rng.normal(size=(2, 6))
    nv = np.append(v[1:], 0.0)
    a, ret = tr.compute_gae(r, v, nv, np.eye(6)[5], 0.9, 1.0)
    disc = np.array([sum(0.9 ** (k - t) * r[k] for k in range(t, 6)) for t in range(6)])
    assert np.allclose(ret, disc, atol=1e-12)
    assert np.allclose(a, disc - v, atol=1e-12)


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        tr.compute_gae(np.zeros(3), np.zeros(2), np.zeros(3), np.ones(3), 0.9, 0.9)


# ---------------------------------------------------------------- surrogate gradients


def _batch(kind, rng, n=12):
    obs = rng.normal(size=(n, 3))
    pol = tr.Policy(3, kind, 4 if kind == "discrete" else 2, rng, hidden=8)
    pol.net.weights[-1] *= 100.0  # move off the near-uniform init
    if kind == "continuous":
        pol.log_std[:] = [-0.3, 0.2]
    acts, lp = pol.act(obs, rng)
    old = lp + rng.normal(scale=0.4, size=n)  # ratios spread on both sides of the clip
    adv = rng.normal(size=n)
    return pol, obs, acts, old, adv


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
@pytest.mark.parametrize("ent", [0.0, 0.05])
def test_surrogate_gradient_check(kind, ent):
    rng = np.random.default_rng(11)
    pol, obs, acts, old, adv = _batch(kind, rng)
    _, grads = pol.surrogate(obs, acts, old, adv, 0.2, ent)
    fd = finite_diff(lambda: pol.surrogate(obs, acts, old, adv, 0.2, ent)[0], pol.params(), h=1e-6)
    for g, f in zip(grads, fd):
        assert rel_err(g, f) < 1e-4


def test_value_loss_gradient_check(rng):
    critic = ap.DenseNet.create([3, 8, 8, 1], rng)
    obs, targets = rng.normal(size=(10, 3)), rng.normal(size=10)
    _, grads = tr.value_loss(critic, obs, targets)
    fd = finite_diff(lambda: tr.value_loss(critic, obs, targets)[0], critic.params())
    for g, f in zip(grads, fd):
        assert rel_err(g, f) < 1e-4


@pytest.mark.parametrize("kind", ["discrete", "continuous"])
def test_zero_advantage_zero_gradient(kind):
    pol, obs, acts, old, _ = _batch(kind, np.random.default_rng(2))
    _, grads = pol.surrogate(obs, acts, old, np.zeros(len(old)), 0.2, 0.0)
    assert all(np.all(g == 0) for g in grads)


def test_clip_boundary_uses_clipped_branch():
    """One sample with ratio exactly 1 + clip and positive advantage: the
    clipped branch is active and carries no gradient."""
    rng = np.random.default_rng(0)
    pol = tr.Policy(3, "discrete", 4, rng, hidden=8)
    obs = rng.normal(size=(1, 3))
    a = np.array([2])
    lp = pol.log_prob(obs, a)
    old = lp - np.log(1.2)
    loss, grads = pol.surrogate(obs, a, old, np.array([1.0]), 0.2, 0.0)
    assert loss == pytest.approx(-1.2, abs=1e-12)
    assert all(np.all(g == 0) for g in grads)
    # just inside the box the unclipped gradient is live
    _, grads = pol.surrogate(obs, a, lp - np.log(1.19), np.array([1.0]), 0.2, 0.0)
    assert any(np.any(g != 0) for g in grads)


# ---------------------------------------------------------------- multipliers


def test_lagrange_examples():
    st_ = tr.LagrangeState([0.5], 10.0, 0.1)
    assert tr.lagrange_update(st_, [0.07], 0.02).lam[0] == pytest.approx(0.495, abs=1e-15)
    assert tr.lagrange_update(st_, [0.02], 0.02).lam[0] == 0.5
    s = tr.LagrangeState([0.0], 10.0, 0.5)
    for _ in range(100):
        s = tr.lagrange_update(s, [-5.0], 1.0)
    assert s.lam[0] == 10.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=5), st.floats(-10, 10), st.floats(0.01, 50))
def test_lagrange_bounds(r, delta, lr):
    s = tr.LagrangeState(np.zeros(len(r)), 10.0, lr)
    for k in range(5):
        s = tr.lagrange_update(s, np.array(r) * (k - 2), delta)
        assert np.all((s.lam >= 0) & (s.lam <= 10.0))


def test_lagrange_state_rejects_out_of_box():
    with pytest.raises(AssertionError):
        tr.LagrangeState([11.0], 10.0, 0.1)


def test_combine_advantages():
    a0, a1, a2 = np.ones(3), np.full(3, 2.0), np.full(3, -1.0)
    assert np.array_equal(tr.combine_advantages([a0, a1, a2], [1.0, 2.0], 0.0), a0)
    assert np.allclose(tr.combine_advantages([a0, a1, a2], [1.0, 2.0], 0.5), 1 + 0.5 * (2 - 2))


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainerConfig(actor_lr=0)
    with pytest.raises(ValueError):
        tr.TrainerConfig(clip=1.0)
    with pytest.raises(ValueError):
        tr.TrainerConfig(gamma=0.0)
    with pytest.raises(ValueError):
        tr.TrainerConfig(batch_size=4001, n_envs=4)
    with pytest.raises(ValueError):
        tr.TrainerConfig(freeze_lambda=11.0)


def test_defaults_navigation_table():
    c = tr.TrainerConfig()
    assert (c.gamma, c.gae_lambda, c.clip, c.entropy, c.lambda_max) == (0.997, 0.95, 0.2, 0.0, 10.0)
    assert (c.actor_lr, c.critic_lr, c.lagrange_lr, c.batch_size, c.epochs) == (3e-4, 1e-3, 0.5, 4000, 10)


# ---------------------------------------------------------------- rollouts and heads


def test_collect_layout_and_bootstrap():
    cfg = tiny()
    envs = GRID.build(0, 4)
    pol = tr.Policy(envs[0].spec.observation_dim, "discrete", 4, np.random.default_rng(0), 16)
    b = tr.collect(pol, envs, 60, np.random.default_rng(1))
    assert len(b) == 240 and b.stacked.shape == (240, 8)
    assert np.all(b.ends[59::60])
    assert np.all(b.ends[b.terminal])
    # every completed episode's return is 0 or 1 in the grid world
    assert set(np.unique(b.episode_returns())) <= {0.0, 1.0}
    # stacked states of the first step repeat the reset snapshot
    assert np.array_equal(b.stacked[0, :2], b.stacked[0, 2:4])
    assert cfg.n_batches == 2


def test_heads_do_not_mix_streams():
    cfg = tiny()
    envs = GRID.build(0, 4)
    spec = envs[0].spec
    learner = tr.Learner(spec, 2, cfg, np.random.default_rng(0))
    b = tr.collect(learner.policy, envs, 60, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    s0, s1, s2 = b.rewards, rng.normal(size=len(b)), rng.normal(size=len(b))
    adv_a, ret_a = learner.head_targets(b, [s0, s1, s2])
    adv_b, ret_b = learner.head_targets(b, [s0, np.zeros(len(b)), s2])
    assert np.array_equal(ret_a[0], ret_b[0]) and np.array_equal(ret_a[2], ret_b[2])
    for c in learner.critics[1].params():
        c[...] = 0.0
    adv_c, ret_c = learner.head_targets(b, [s0, np.zeros(len(b)), s2])
    assert np.all(ret_c[1] == 0) and np.all(adv_c[1] == 0)


# ---------------------------------------------------------------- runs


def _policy_bytes(run):
    return [ap.dumps(r.policy.net) for r in run.records]


def test_alpha_zero_itr_is_independent_ppo():
    cfg = tiny(freeze_lambda=0.0, intrinsic=it.IntrinsicConfig("rbf", alpha=0.0), population=3)
    a = tr.itr_run(cfg, GRID, 7)
    b = tr.itr_run(cfg, GRID, 7, unconstrained=True)
    assert _policy_bytes(a) == _policy_bytes(b)
    assert [r.J_hat for r in a.metrics] == [r.J_hat for r in b.metrics]
    # and each policy equals a single-policy run with the same index seeds
    c = tr.itr_run(replace(cfg, population=1), GRID, 7, unconstrained=True)
    assert _policy_bytes(c)[0] == _policy_bytes(a)[0]


def test_alpha_zero_without_freeze_matches_too():
    cfg = tiny(intrinsic=it.IntrinsicConfig("rbf", alpha=0.0))
    a = tr.itr_run(cfg, GRID, 3)
    b = tr.itr_run(cfg, GRID, 3, unconstrained=True)
    assert _policy_bytes(a) == _policy_bytes(b)


def test_single_policy_has_no_constraints():
    run = tr.itr_run(tiny(population=1), GRID, 0)
    assert len(run.archive) == 1 and all(r.R_int == [] for r in run.metrics)


def test_itr_run_reproducible_and_bounded():
    cfg = tiny(population=3, lagrange_lr=50.0)
    a, b = tr.itr_run(cfg, GRID, 5), tr.itr_run(cfg, GRID, 5)
    assert tr.metrics_csv(a.metrics, 2) == tr.metrics_csv(b.metrics, 2)
    steps = [r.step for r in a.metrics]
    assert steps == sorted(steps)
    for r in a.metrics:
        assert all(0.0 <= x <= cfg.lambda_max for x in r.lam)
    assert a.meta["policy_steps_per_lambda_step"] == cfg.epochs * cfg.minibatches
    # constraint heads: 1 + iteration index
    assert [len(r.lam) for r in a.metrics] == [0, 0, 1, 1, 2, 2]


def test_wd_run_keeps_critics_clipped():
    cfg = tiny(population=2, intrinsic=it.IntrinsicConfig("wd", alpha=5.0, critic_lr=1.0))
    run = tr.itr_run(cfg, GRID, 1)
    critic = run.archive[0].critic
    assert critic is not None
    assert max(np.abs(p).max() for p in critic.params()) <= it.CRITIC_CLIP


def test_resume_from_archive():
    cfg = tiny(population=3)
    full = tr.itr_run(cfg, GRID, 2)
    part = tr.itr_run(replace(cfg, population=2), GRID, 2)
    rest = tr.itr_run(cfg, GRID, 2, archive=part.archive)
    assert ap.dumps(rest.records[0].policy.net) == ap.dumps(full.records[2].policy.net)


def test_pbt_single_policy_is_ppo():
    cfg = tiny(population=1)
    a = tr.pbt_run(cfg, GRID, 4)
    b = tr.itr_run(cfg, GRID, 4, unconstrained=True)
    assert _policy_bytes(a) == _policy_bytes(b)


def test_pbt_zero_delta_keeps_multipliers_zero():
    # a distance-valued reward is never below 0, so a zero threshold is always met
    cfg = tiny(population=3, delta=0.0, intrinsic=it.IntrinsicConfig("final-l2", alpha=1.0))
    run = tr.pbt_run(cfg, GRID, 0)
    assert all(all(x == 0.0 for x in r.lam) for r in run.metrics)
    b = tr.itr_run(replace(cfg, intrinsic=it.IntrinsicConfig("final-l2", alpha=0.0)), GRID, 0, unconstrained=True)
    assert _policy_bytes(run) == _policy_bytes(b)


def test_pbt_multipliers_symmetric_and_bounded():
    cfg = tiny(population=3, delta=0.0, lagrange_lr=100.0, intrinsic=it.IntrinsicConfig("rbf", alpha=1.0))
    cfg = replace(cfg, delta=1.0)
    run = tr.pbt_run(cfg, GRID, 0)
    last = run.metrics[-3:]
    lam = np.zeros((3, 3))
    for r in last:
        others = [j for j in range(3) if j != r.iteration]
        lam[r.iteration, others] = r.lam
    assert np.array_equal(lam, lam.T)
    assert np.all((lam >= 0) & (lam <= cfg.lambda_max))


# ---------------------------------------------------------------- calibration


def test_calibration_arithmetic():
    assert tr.threshold_from(0.01, 1.2) == pytest.approx(0.012)
    assert tr.threshold_from(-0.01, 1.2) == pytest.approx(-0.01 / 1.2)
    assert tr.alpha_from(1.0, 10.0, 0.012, 1.0) == pytest.approx(1 / 0.12)
    assert tr.alpha_from(1.0, 10.0, 0.012) == pytest.approx(8.33, abs=0.01)


def test_calibrate_runs_and_sweeps():
    cfg = tiny(steps=2400, batch_size=400)
    try:
        cal = tr.calibrate(cfg, GRID, 0)
    except tr.CalibrationError as exc:  # tiny budgets can fail to reach the goal
        pytest.skip(str(exc))
    assert [c for c, _, _ in cal.sweep] == list(tr.C1_SWEEP)
    assert cal.delta == tr.threshold_from(cal.D, 1.2)
    assert "c1" in cal.report()

"""PPO with multi-head value estimation, Lagrangian multipliers, and the
iterative (ITR) and population (PBT) diversity loops.

Every random draw comes from a generator seeded by ``(seed, index, purpose)``
so that a policy's training stream depends only on its own index. Two
consequences the tests rely on: with ``alpha = 0`` each ITR iteration is
bit-identical to an independent PPO run, and PBT with ``delta = 0`` trains
the same policies as ITR with no constraints.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import approximator as ap
from . import intrinsic as it
from .environments import make_env
from .kernels import gae as _gae_kernel
from .measures import StateCloud

# generator purposes
_INIT, _ROLLOUT, _UPDATE, _EVAL, _CRITIC_F = range(5)


class TrainingError(RuntimeError):
    """Numeric failure inside an iteration (NaN loss, non-finite parameters)."""


def rng_for(seed, index, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(purpose)]))


# ---------------------------------------------------------------- config


@dataclass
class TrainerConfig:
    gamma: float = 0.997
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy: float = 0.0
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    lagrange_lr: float = 0.5
    epochs: int = 10
    minibatches: int = 4
    batch_size: int = 4000
    n_envs: int = 4
    population: int = 4
    steps: int = 400_000
    delta: float = 0.0
    lambda_max: float = 10.0
    max_grad_norm: float = 0.5
    hidden: int = 64
    eval_episodes: int = 64
    freeze_lambda: float | None = None
    intrinsic: it.IntrinsicConfig = field(default_factory=it.IntrinsicConfig)

    def __post_init__(self):
        for name in ("actor_lr", "critic_lr", "lagrange_lr", "lambda_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma must lie in (0, 1] and gae_lambda in [0, 1]")
        if self.entropy < 0:
            raise ValueError("entropy must be non-negative")
        for name in ("epochs", "minibatches", "batch_size", "n_envs", "population", "steps",
                     "hidden", "eval_episodes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.batch_size % self.n_envs:
            raise ValueError("batch_size must be a multiple of n_envs")
        if self.batch_size < self.minibatches:
            raise ValueError("batch_size must be at least the number of minibatches")
        if self.freeze_lambda is not None and not 0 <= self.freeze_lambda <= self.lambda_max:
            raise ValueError("freeze_lambda must lie in [0, lambda_max]")

    @property
    def alpha(self):
        return self.intrinsic.alpha

    @property
    def n_batches(self):
        return max(1, self.steps // self.batch_size)


# ---------------------------------------------------------------- GAE


def compute_gae(rewards, values, next_values, ends, gamma, lam):
    """Advantages and return targets for one reward stream.

    ``next_values`` must already be 0 after terminal steps; ``ends`` marks
    the last step of every segment (terminal or cut off by the batch).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.uint8)
    n = len(rewards)
    if not (len(values) == len(next_values) == len(ends) == n):
        raise ValueError("rewards, values, next_values and ends must have equal length")
    adv = np.asarray(_gae_kernel(rewards, values, next_values, ends, float(gamma), float(lam)))
    return adv, adv + values


# ---------------------------------------------------------------- policy


class Policy:
    """Categorical or diagonal-Gaussian policy on a tanh MLP.

    The Gaussian mean is squashed by ``tanh`` so it stays inside the unit
    velocity box; an unbounded mean drifts past the clamp and the sampling
    noise stops having any effect.
    """

    def __init__(self, obs_dim, action_kind, action_dim, rng, hidden=64):
        self.net = ap.DenseNet.create([obs_dim, hidden, hidden, action_dim], rng,
                                      activation="tanh", out_gain=0.01)
        self.kind = action_kind
        self.log_std = np.zeros(action_dim) if action_kind == "continuous" else None

    def params(self):
        ps = self.net.params()
        return ps + [self.log_std] if self.log_std is not None else ps

    def copy(self):
        out = object.__new__(Policy)
        out.net = self.net.copy()
        out.kind = self.kind
        out.log_std = None if self.log_std is None else self.log_std.copy()
        return out

    def act(self, obs, rng):
        out = self.net.forward(obs)
        if not np.all(np.isfinite(out)):
            raise TrainingError("policy produced non-finite outputs")
        if self.kind == "discrete":
            return ap.sample_categorical_batch(out, rng)
        mean = np.tanh(out)
        a = mean + np.exp(self.log_std) * rng.standard_normal(out.shape)
        return a, ap.gaussian_log_prob(a, mean, self.log_std)

    def mode(self, obs):
        out = self.net.forward(obs)
        return np.argmax(out, axis=-1) if self.kind == "discrete" else np.tanh(out)

    def log_prob(self, obs, actions):
        out = self.net.forward(obs)
        if self.kind == "discrete":
            lp = ap.log_softmax(out)
            return lp[np.arange(len(lp)), np.asarray(actions, dtype=np.int64)]
        return ap.gaussian_log_prob(actions, np.tanh(out), self.log_std)

    def surrogate(self, obs, actions, old_logp, adv, clip, ent_coef):
        """Clipped-surrogate loss and its gradients (one array per parameter)."""
        n = len(adv)
        out = self.net.forward(obs)
        if self.kind == "discrete":
            lp = ap.log_softmax(out)
            p = np.exp(lp)
            a = np.asarray(actions, dtype=np.int64)
            logp = lp[np.arange(n), a]
            ent = -(p * lp).sum(axis=1)
        else:
            std = np.exp(self.log_std)
            mean = np.tanh(out)
            z = (actions - mean) / std
            logp = ap.gaussian_log_prob(actions, mean, self.log_std)
            ent = np.full(n, ap.gaussian_entropy(self.log_std))
        ratio = np.exp(logp - old_logp)
        clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
        surr = np.minimum(ratio * adv, clipped * adv)
        loss = -surr.mean() - ent_coef * ent.mean()
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite policy loss (max |adv| {np.abs(adv).max():.3g}, "
                                f"max ratio {ratio.max():.3g})")
        # the unclipped branch carries gradient; at the boundary the clipped one wins
        live = (ratio * adv < clipped * adv) | ((ratio > 1.0 - clip) & (ratio < 1.0 + clip))
        coef = np.where(live, adv * ratio, 0.0) / n  # -dloss/dlogp
        if self.kind == "discrete":
            g_out = -coef[:, None] * (np.eye(out.shape[1])[a] - p)
            g_out += (ent_coef / n) * p * (lp + ent[:, None])
            return loss, self.net.backward(obs, g_out).flat_list()
        g_out = -coef[:, None] * z / std * (1.0 - mean * mean)
        g_log_std = -(coef[:, None] * (z * z - 1.0)).sum(axis=0) - ent_coef
        return loss, self.net.backward(obs, g_out).flat_list() + [g_log_std]


def value_loss(critic, obs, targets):
    v = critic.forward(obs)[:, 0]
    err = v - targets
    loss = 0.5 * float(np.mean(err * err))
    if not math.isfinite(loss):
        raise TrainingError("non-finite value loss")
    return loss, critic.backward(obs, (err / len(err))[:, None]).flat_list()


# ---------------------------------------------------------------- multipliers


@dataclass
class LagrangeState:
    lam: np.ndarray
    lambda_max: float = 10.0
    lr: float = 0.5

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.check()

    def check(self):
        if np.any(self.lam < 0) or np.any(self.lam > self.lambda_max):
            raise AssertionError(f"multiplier left [0, {self.lambda_max}]: {self.lam}")


def lagrange_update(state, r_int, delta):
    """Projected ascent ``lambda <- clip(lambda + lr (delta - R_int), 0, lambda_max)``."""
    r = np.asarray(r_int, dtype=np.float64)
    lam = np.clip(state.lam + state.lr * (delta - r), 0.0, state.lambda_max)
    out = LagrangeState(lam, state.lambda_max, state.lr)
    return out


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutBatch:
    """Env-major rollout of ``n_envs`` streams of ``T`` steps each (flattened)."""

    obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    terminal: np.ndarray
    ends: np.ndarray
    stacked: np.ndarray
    episode: np.ndarray  # global episode id per step
    complete: np.ndarray  # per episode id: ended inside the batch
    bootstrap_obs: np.ndarray  # (n_envs, obs_dim) observation after each stream
    infos: list  # info dict of every terminal step, by episode id
    intrinsic: np.ndarray | None = None  # (n_constraints, N) raw
    advantages: np.ndarray | None = None
    returns: list | None = None

    def __len__(self):
        return len(self.rewards)

    def episode_sums(self, x):
        sums = np.bincount(self.episode, weights=x, minlength=len(self.complete))
        return sums[self.complete]

    def episode_returns(self):
        return self.episode_sums(self.rewards)

    def final_snapshots(self, raw_dim):
        idx = np.flatnonzero(self.terminal)
        if len(idx) == 0:
            n_envs = len(self.bootstrap_obs)
            idx = np.arange(1, n_envs + 1) * (len(self) // n_envs) - 1
        return self.stacked[idx, -raw_dim:]


def collect(policy, envs, n_steps, rng):
    """Run every env for ``n_steps`` from a fresh reset."""
    E = len(envs)
    obs_dim = envs[0].spec.observation_dim
    raw_dim = envs[0].spec.state_dim
    obs = np.empty((E, n_steps, obs_dim))
    actions = None
    logp = np.empty((E, n_steps))
    rew = np.zeros((E, n_steps))
    term = np.zeros((E, n_steps), dtype=bool)
    stacked = np.empty((E, n_steps, it.STACK * raw_dim))
    episode = np.empty((E, n_steps), dtype=np.int64)
    stackers = [it.FrameStacker(raw_dim) for _ in envs]
    cur = np.stack([env.reset() for env in envs])
    for e, env in enumerate(envs):
        stackers[e].reset(env.snapshot())
    ep_ids = list(range(E))
    next_id = E
    infos = {}
    for t in range(n_steps):
        obs[:, t] = cur
        a, lp = policy.act(cur, rng)
        if actions is None:
            actions = np.empty((E, n_steps) + np.shape(a)[1:], dtype=np.asarray(a).dtype)
        actions[:, t] = a
        logp[:, t] = lp
        for e, env in enumerate(envs):
            res = env.step(a[e])
            rew[e, t] = res.reward
            stacked[e, t] = stackers[e].push(res.state_snapshot)
            episode[e, t] = ep_ids[e]
            if res.terminated:
                term[e, t] = True
                infos[ep_ids[e]] = res.info
                ep_ids[e] = next_id
                next_id += 1
                cur[e] = env.reset()
                stackers[e].reset(env.snapshot())
            else:
                cur[e] = res.next_observation
    ends = term.copy()
    ends[:, -1] = True
    complete = np.zeros(next_id, dtype=bool)
    complete[list(infos)] = True
    # ids are assigned in creation order, so renumber to keep them dense per batch
    return RolloutBatch(
        obs.reshape(E * n_steps, obs_dim),
        actions.reshape((E * n_steps,) + actions.shape[2:]),
        logp.ravel(), rew.ravel(), term.ravel(), ends.ravel(),
        stacked.reshape(E * n_steps, -1), episode.ravel(), complete, cur.copy(),
        [infos.get(k) for k in range(next_id)],
    )


@dataclass
class Episode:
    stacked: np.ndarray
    ret: float
    info: dict


def run_episodes(policy, envs, n_episodes, rng, deterministic=False):
    """Complete episodes in lockstep groups of ``len(envs)``."""
    raw_dim = envs[0].spec.state_dim
    out = []
    while len(out) < n_episodes:
        group = envs[:min(len(envs), n_episodes - len(out))]
        stackers = [it.FrameStacker(raw_dim) for _ in group]
        cur = np.stack([env.reset() for env in group])
        for s, env in zip(stackers, group):
            s.reset(env.snapshot())
        frames = [[] for _ in group]
        rets = [0.0] * len(group)
        info = [None] * len(group)
        active = np.ones(len(group), dtype=bool)
        while active.any():
            a = policy.mode(cur) if deterministic else policy.act(cur, rng)[0]
            for e in np.flatnonzero(active):
                res = group[e].step(a[e])
                frames[e].append(stackers[e].push(res.state_snapshot))
                rets[e] += res.reward
                cur[e] = res.next_observation
                if res.terminated:
                    active[e] = False
                    info[e] = res.info
        out.extend(Episode(np.array(f), r, i) for f, r, i in zip(frames, rets, info))
    return out


# ---------------------------------------------------------------- learner


class Learner:
    """One policy with ``1 + n_constraints`` value heads and their optimisers."""

    def __init__(self, spec, n_constraints, config, rng):
        self.config = config
        self.policy = Policy(spec.observation_dim, spec.action_kind, spec.action_dim, rng, config.hidden)
        self.critics = [ap.DenseNet.create([spec.observation_dim, config.hidden, config.hidden, 1], rng)
                        for _ in range(1 + n_constraints)]
        self.policy_opt = ap.Adam(self.policy.params(), config.actor_lr, max_grad_norm=config.max_grad_norm)
        self.critic_opts = [ap.Adam(c.params(), config.critic_lr, max_grad_norm=config.max_grad_norm)
                            for c in self.critics]
        self.policy_steps = 0

    def head_targets(self, batch, streams):
        """GAE per head; ``streams`` lists one reward array per head."""
        cfg = self.config
        advs, rets = [], []
        n_envs = len(batch.bootstrap_obs)
        last = np.arange(1, n_envs + 1) * (len(batch) // n_envs) - 1
        for critic, r in zip(self.critics, streams):
            v = critic.forward(batch.obs)[:, 0]
            nv = np.empty_like(v)
            nv[:-1] = v[1:]
            nv[last] = critic.forward(batch.bootstrap_obs)[:, 0]
            nv[batch.terminal] = 0.0
            a, ret = compute_gae(r, v, nv, batch.ends, cfg.gamma, cfg.gae_lambda)
            advs.append(a)
            rets.append(ret)
        return advs, rets


def combine_advantages(advs, lam, alpha):
    """Env-head advantage plus ``alpha * sum_j lambda_j * A_j``."""
    if alpha == 0 or len(advs) == 1:
        return advs[0]
    return it.combine_rewards(advs[0], list(zip(lam, advs[1:])), alpha)


def ppo_update(learner, batch, rng):
    """Clipped PPO over ``epochs x minibatches`` steps; value heads share the
    minibatch order. Returns mean losses."""
    cfg = learner.config
    adv = batch.advantages
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch)
    stats = {"policy_loss": 0.0, "value_loss": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for mb in np.array_split(perm, cfg.minibatches):
            loss, grads = learner.policy.surrogate(batch.obs[mb], batch.actions[mb], batch.logp[mb],
                                                   adv[mb], cfg.clip, cfg.entropy)
            learner.policy_opt.step(grads)
            learner.policy_steps += 1
            stats["policy_loss"] += loss
            for critic, opt, ret in zip(learner.critics, learner.critic_opts, batch.returns):
                vl, vg = value_loss(critic, batch.obs[mb], ret[mb])
                opt.step(vg)
                stats["value_loss"] += vl
            count += 1
    if not all(np.all(np.isfinite(p)) for p in learner.policy.params()):
        raise TrainingError("policy parameters became non-finite")
    return {k: v / count for k, v in stats.items()}


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRow:
    iteration: int
    step: int
    J_hat: float
    R_int: list
    lam: list
    wall_time: float = 0.0


def metrics_csv(rows, n_constraints):
    head = ["iteration", "step", "J_hat"]
    head += [f"R_int_{j}" for j in range(n_constraints)] + [f"lambda_{j}" for j in range(n_constraints)]
    lines = [",".join(head)]
    for r in rows:
        pad = [""] * (n_constraints - len(r.R_int))
        vals = [str(r.iteration), str(r.step), repr(float(r.J_hat))]
        vals += [repr(float(x)) for x in r.R_int] + pad + [repr(float(x)) for x in r.lam] + pad
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def timing_csv(rows):
    lines = ["iteration,step,wall_time"] + [f"{r.iteration},{r.step},{r.wall_time:.6f}" for r in rows]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- drivers


@dataclass
class EnvSetup:
    name: str = "gridworld"
    grid_size: int = 5
    n_landmarks: int = 4
    seed: int | None = None
    scale: float = 1.0
    separation: float = 0.6

    def build(self, run_seed, n):
        seed = run_seed if self.seed is None else self.seed
        nav = {"separation": self.separation} if self.name == "nav" else {}
        return [make_env(self.name, grid_size=self.grid_size, n_landmarks=self.n_landmarks, seed=seed,
                         scale=self.scale, **nav) for _ in range(n)]


@dataclass
class PolicyRecord:
    index: int
    policy: Policy
    episodes: list
    greedy: list
    lam: np.ndarray
    failed: bool = False


@dataclass
class RunResult:
    algo: str
    records: list
    archive: it.Archive | None
    metrics: list
    config: TrainerConfig
    meta: dict = field(default_factory=dict)

    @property
    def policies(self):
        return [r.policy for r in self.records]


def _check_invariants(lagrange, model):
    lagrange.check()
    for c in model.critics:
        if c is not None:
            worst = max(float(np.abs(p).max()) for p in c.params())
            if worst > it.CRITIC_CLIP + 1e-15:
                raise AssertionError(f"critic parameter {worst} outside the clip box")


def _intrinsic_returns(batch, raw):
    if raw.shape[0] == 0 or not batch.complete.any():
        return None
    return np.array([batch.episode_sums(r).mean() for r in raw])


def _mean_return(batch):
    rets = batch.episode_returns()
    return float(rets.mean()) if len(rets) else 0.0


def _frozen(lagrange, value):
    return LagrangeState(np.full(len(lagrange.lam), value), lagrange.lambda_max, lagrange.lr)


def _step_learner(learner, batch, model, lagrange, cfg, update_rng, delta):
    """Intrinsic rewards, lambda step, critic-f step, PPO; returns the new multipliers."""
    raw_dim = len(batch.stacked[0]) // it.STACK
    raw = model.rewards(batch.stacked, batch.terminal, raw_dim)
    batch.intrinsic = raw
    streams = [batch.rewards] + list(model.normalize(raw, batch.ends))
    advs, rets = learner.head_targets(batch, streams)
    batch.returns = rets
    batch.advantages = combine_advantages(advs, lagrange.lam, cfg.alpha)
    r_int = _intrinsic_returns(batch, raw)
    if cfg.freeze_lambda is not None:
        lagrange = _frozen(lagrange, cfg.freeze_lambda)
    elif r_int is not None:
        lagrange = lagrange_update(lagrange, r_int, delta)
    model.update_critics(batch.stacked)
    ppo_update(learner, batch, update_rng)
    _check_invariants(lagrange, model)
    return lagrange, r_int


def _new_model(cfg, references, horizon, index, seed, dim):
    critics = None
    if cfg.intrinsic.variant == "wd":
        crng = rng_for(seed, index, _CRITIC_F)
        critics = [it.make_critic(dim, crng) for _ in references]
    return it.IntrinsicModel(cfg.intrinsic, references, horizon, critics, cfg.gamma)


def itr_run(cfg, env_setup, seed, log=None, archive=None, unconstrained=False):
    """Train policies one after another, each constrained against all earlier
    ones through the archive, until the population has ``cfg.population``
    members. Passing a reloaded ``archive`` resumes a run after its last entry.

    ``unconstrained`` drops the constraint heads altogether (plain PPO with
    per-index seeds); the archive is still filled.
    """
    envs = env_setup.build(seed, cfg.n_envs)
    spec = envs[0].spec
    steps_per_env = cfg.batch_size // cfg.n_envs
    archive = it.Archive(seed=seed) if archive is None else archive
    records, rows = [], []
    step = 0
    for i in range(len(archive), cfg.population):
        init_rng = rng_for(seed, i, _INIT)
        roll_rng = rng_for(seed, i, _ROLLOUT)
        upd_rng = rng_for(seed, i, _UPDATE)
        refs = [] if unconstrained else archive.entries
        n_c = len(refs)
        learner = Learner(spec, n_c, cfg, init_rng)
        model = _new_model(cfg, refs, spec.horizon, i, seed, it.STACK * spec.state_dim)
        lagrange = LagrangeState(np.zeros(n_c), cfg.lambda_max, cfg.lagrange_lr)
        if cfg.freeze_lambda is not None:
            lagrange = _frozen(lagrange, cfg.freeze_lambda)
        for _ in range(cfg.n_batches):
            t0 = time.perf_counter()
            batch = collect(learner.policy, envs, steps_per_env, roll_rng)
            lam_used = lagrange.lam.copy()
            lagrange, r_int = _step_learner(learner, batch, model, lagrange, cfg, upd_rng, cfg.delta)
            step += len(batch)
            rows.append(MetricsRow(i, step, _mean_return(batch),
                                   list(r_int) if r_int is not None else [math.nan] * n_c,
                                   list(lagrange.lam), time.perf_counter() - t0))
            if log:
                log(rows[-1], lam_used)
        if learner.policy_steps != cfg.n_batches * cfg.epochs * cfg.minibatches:
            raise AssertionError("policy/multiplier step ratio broken")
        eval_rng = rng_for(seed, i, _EVAL)
        episodes = run_episodes(learner.policy, envs, cfg.eval_episodes, eval_rng)
        greedy = run_episodes(learner.policy, envs[:1], 1, eval_rng, deterministic=True)
        for j, c in enumerate(model.critics):
            if c is not None:
                refs[j].critic = c
        archive.add([e.stacked for e in episodes], policy_index=len(archive))
        records.append(PolicyRecord(i, learner.policy, episodes, greedy, lagrange.lam.copy()))
    return RunResult("itr", records, archive, rows, cfg,
                     {"policy_steps_per_lambda_step": cfg.epochs * cfg.minibatches})


def pbt_run(cfg, env_setup, seed, log=None):
    """Train the whole population at once under pairwise constraints against
    each other's latest rollout batches."""
    M = cfg.population
    spec = env_setup.build(seed, 1)[0].spec
    env_sets = [env_setup.build(seed, cfg.n_envs) for _ in range(M)]
    steps_per_env = cfg.batch_size // cfg.n_envs
    dim = it.STACK * spec.state_dim
    learners, models, rngs = [], [], []
    for k in range(M):
        learners.append(Learner(spec, M - 1, cfg, rng_for(seed, k, _INIT)))
        rngs.append((rng_for(seed, k, _ROLLOUT), rng_for(seed, k, _UPDATE)))
    # one multiplier per unordered pair
    pair_lam = np.zeros((M, M))
    if cfg.freeze_lambda is not None:
        pair_lam[:] = cfg.freeze_lambda
    rows = []
    step = 0
    for _ in range(cfg.n_batches):
        t0 = time.perf_counter()
        batches = [collect(learners[k].policy, env_sets[k], steps_per_env, rngs[k][0]) for k in range(M)]
        refs = [it.LiveReference(StateCloud(b.stacked).subsample(4096, rng_for(seed, k, _EVAL)),
                                 b.final_snapshots(spec.state_dim)) for k, b in enumerate(batches)]
        if not models:
            models = [_new_model(cfg, [refs[j] for j in range(M) if j != k], spec.horizon, k, seed, dim)
                      for k in range(M)]
        r_all = np.full((M, M), np.nan)
        for k in range(M):
            others = [j for j in range(M) if j != k]
            models[k].set_references([refs[j] for j in others])
            b = batches[k]
            raw = models[k].rewards(b.stacked, b.terminal, spec.state_dim)
            b.intrinsic = raw
            lam_k = pair_lam[k, others]
            streams = [b.rewards] + list(models[k].normalize(raw, b.ends))
            advs, rets = learners[k].head_targets(b, streams)
            b.returns = rets
            b.advantages = combine_advantages(advs, lam_k, cfg.alpha)
            r_int = _intrinsic_returns(b, raw)
            if r_int is not None:
                r_all[k, others] = r_int
        if cfg.freeze_lambda is None:
            for k in range(M):
                for j in range(k + 1, M):
                    est = np.nanmean([r_all[k, j], r_all[j, k]])
                    if not np.isnan(est):
                        st = lagrange_update(LagrangeState([pair_lam[k, j]], cfg.lambda_max, cfg.lagrange_lr),
                                             [est], cfg.delta)
                        pair_lam[k, j] = pair_lam[j, k] = st.lam[0]
        for k in range(M):
            models[k].update_critics(batches[k].stacked)
            ppo_update(learners[k], batches[k], rngs[k][1])
            others = [j for j in range(M) if j != k]
            _check_invariants(LagrangeState(pair_lam[k, others], cfg.lambda_max, cfg.lagrange_lr), models[k])
        step += len(batches[0])
        dt = time.perf_counter() - t0
        for k in range(M):
            others = [j for j in range(M) if j != k]
            rows.append(MetricsRow(k, step, _mean_return(batches[k]), list(r_all[k, others]),
                                   list(pair_lam[k, others]), dt))
            if log:
                log(rows[-1], None)
    envs = env_sets[0]
    records = []
    for k in range(M):
        eval_rng = rng_for(seed, k, _EVAL)
        episodes = run_episodes(learners[k].policy, envs, cfg.eval_episodes, eval_rng)
        greedy = run_episodes(learners[k].policy, envs[:1], 1, eval_rng, deterministic=True)
        others = [j for j in range(M) if j != k]
        records.append(PolicyRecord(k, learners[k].policy, episodes, greedy, pair_lam[k, others].copy()))
    return RunResult("pbt", records, None, rows, cfg,
                     {"policy_steps_per_lambda_step": cfg.epochs * cfg.minibatches})


# ---------------------------------------------------------------- calibration

C1_SWEEP = (1.0, 1.2, 1.4, 1.6, 1.8, 2.0)


class CalibrationError(RuntimeError):
    pass


def threshold_from(d, c1):
    """Scale a measured diversity by ``c1``, always towards *more* diversity.

    Similarity-style measures (RBF) are negative, so the tighter threshold
    is ``d / c1`` there.
    """
    return c1 * d if d > 0 else d / c1


def alpha_from(j_max, lambda_max, delta, c2=1.0):
    return j_max / (c2 * lambda_max * abs(delta))


@dataclass
class Calibration:
    D: float
    J_max: float
    delta: float
    alpha: float
    c1: float
    c2: float
    sweep: list

    def report(self):
        lines = [f"D_S(pi0, pi1) = {self.D:.6g}   J_max = {self.J_max:.6g}",
                 f"{'c1':>5} {'delta':>12} {'alpha':>12}"]
        for c1, d, a in self.sweep:
            mark = " *" if c1 == self.c1 else ""
            lines.append(f"{c1:>5.1f} {d:>12.6g} {a:>12.6g}{mark}")
        return "\n".join(lines)


def intrinsic_return(episodes, reference, cfg, horizon, critic=None):
    """Mean per-episode intrinsic return of ``episodes`` against ``reference``."""
    model = it.IntrinsicModel(cfg, [reference], horizon, [critic])
    vals = []
    for ep in episodes:
        mask = np.zeros(len(ep.stacked), dtype=bool)
        mask[-1] = True
        raw_dim = ep.stacked.shape[1] // it.STACK
        vals.append(model.rewards(ep.stacked, mask, raw_dim)[0].sum())
    return float(np.mean(vals))


def calibrate(cfg, env_setup, seed, c1=1.2, c2=1.0, log=None):
    """Two unconstrained iterations, then ``delta = c1 D_S(pi0, pi1)`` and the
    balancing ``alpha``."""
    base = replace(cfg, population=2, delta=0.0, freeze_lambda=0.0,
                   intrinsic=replace(cfg.intrinsic, alpha=0.0))
    run = itr_run(base, env_setup, seed, log=log)
    horizon = env_setup.build(seed, 1)[0].spec.horizon
    entry = run.archive[0]
    critic = None
    if cfg.intrinsic.variant == "wd":
        critic = it.make_critic(entry.stacked.shape[1], rng_for(seed, 0, _CRITIC_F))
        cur = np.concatenate([e.stacked for e in run.records[1].episodes])
        for _ in range(200):
            critic = it.critic_update(critic, cur, entry.cloud, cfg.intrinsic.critic_lr)
    D = intrinsic_return(run.records[1].episodes, entry, cfg.intrinsic, horizon, critic)
    if D == 0:
        raise CalibrationError("D_S(pi0, pi1) = 0: the two unconstrained policies are identical")
    j_max = max(np.mean([e.ret for e in r.episodes]) for r in run.records)
    if j_max <= 0:
        raise CalibrationError("neither unconstrained policy earned any reward")
    sweep = [(c, threshold_from(D, c), alpha_from(j_max, cfg.lambda_max, threshold_from(D, c), c2))
             for c in C1_SWEEP]
    delta = threshold_from(D, c1)
    alpha = float(alpha_from(j_max, cfg.lambda_max, delta, c2))
    return Calibration(float(D), float(j_max), float(delta), alpha, c1, c2, sweep)

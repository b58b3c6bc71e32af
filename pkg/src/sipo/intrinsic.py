"""Intrinsic rewards measuring distance from archived policies' states.

Three realisations share one interface (:class:`IntrinsicModel`):

* ``rbf``: negative mean Gaussian-kernel similarity to an archived cloud,
* ``wd``: a weight-clipped critic's score against the archived cloud mean,
* ``final-l2``: squared distance of an episode's final state to the archived
  final states, paid on the last step only (the navigation setting).

All rewards are computed on stacked states: the last ``STACK`` global-state
snapshots, with the first snapshot repeated at episode start.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import approximator as ap
from .io_utils import atomic_write_text
from .kernels import rbf_similarity
from .measures import StateCloud

STACK = 4
CRITIC_CLIP = 0.01
VARIANTS = ("rbf", "wd", "final-l2")


# ---------------------------------------------------------------- stacking


def stack_episode(snapshots, k=STACK):
    """Stack ``k`` consecutive snapshots per timestep, oldest first."""
    s = np.asarray(snapshots, dtype=np.float64)
    idx = np.arange(len(s))[:, None] + np.arange(-k + 1, 1)[None, :]
    return s[np.maximum(idx, 0)].reshape(len(s), -1)


class FrameStacker:
    """Online stacking for one environment stream."""

    def __init__(self, dim, k=STACK):
        self.dim, self.k = dim, k
        self.frames = None

    def reset(self, first):
        self.frames = np.tile(np.asarray(first, dtype=np.float64), (self.k, 1))
        return self.frames.ravel().copy()

    def push(self, snapshot):
        self.frames = np.roll(self.frames, -1, axis=0)
        self.frames[-1] = snapshot
        return self.frames.ravel().copy()


# ---------------------------------------------------------------- rewards


def rbf_reward(s, cloud, sigma2, horizon):
    """``-(1/H) mean_{s'} exp(-|s - s'|^2 / (2 sigma^2))``; ``s`` may be a batch."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    pts = cloud.points if isinstance(cloud, StateCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("archive entry is empty")
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    q = s[None, :] if single else s
    if q.shape[1] != pts.shape[1]:
        raise ValueError(f"state dim {q.shape[1]} != archive dim {pts.shape[1]}")
    r = -rbf_similarity(q, pts, sigma2) / horizon
    return float(r[0]) if single else r


def wd_reward(s, cloud, critic, horizon):
    """``(1/H) [f(s) - mean_{s'} f(s')]`` for the critic ``f``."""
    pts = cloud.points if isinstance(cloud, StateCloud) else np.asarray(cloud, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    q = s[None, :] if single else s
    ref = float(critic.forward(pts)[:, 0].mean())
    r = (critic.forward(q)[:, 0] - ref) / horizon
    return float(r[0]) if single else r


def final_l2_reward(final_states, archive_finals):
    """Mean squared distance from each final state to the archived final states."""
    f = np.atleast_2d(np.asarray(final_states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(archive_finals, dtype=np.float64))
    diff = f[:, None, :] - a[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff).mean(axis=1)


def make_critic(input_dim, rng, hidden=64):
    """Critic f with every parameter already inside the clip box."""
    net = ap.DenseNet.create([input_dim, hidden, hidden, 1], rng, activation="relu")
    net.clip_(CRITIC_CLIP)
    return net


def critic_update(critic, batch_current, archived, lr):
    """One ascent step on ``mean f(current) - mean f(archived)``, then clip.

    Returns a new net; the input is left untouched.
    """
    cur = batch_current.points if isinstance(batch_current, StateCloud) else np.asarray(batch_current)
    old = archived.points if isinstance(archived, StateCloud) else np.asarray(archived)
    if len(cur) == 0 or len(old) == 0:
        raise ValueError("both clouds must be non-empty")
    net = critic.copy()
    g_cur = net.backward(cur, np.full((len(cur), 1), 1.0 / len(cur)))
    g_old = net.backward(old, np.full((len(old), 1), 1.0 / len(old)))
    grad = g_cur + g_old.scale(-1.0)
    if not np.all(np.isfinite(grad.flat())):
        raise ap.NonFiniteError("non-finite critic gradient")
    net.apply(grad, lr)
    net.clip_(CRITIC_CLIP)
    return net


def combine_rewards(r_env, intrinsics, alpha):
    """``r_env + alpha * sum_j lambda_j * r_j`` for ``intrinsics = [(lambda_j, r_j)]``."""
    total = 0.0
    for lam, r in intrinsics:
        if lam < 0:
            raise ValueError("multipliers must be non-negative")
        total = total + lam * r
    if alpha == 0:
        return r_env
    return r_env + alpha * total


class RunningNormalizer:
    """Scales one reward stream by the running std of its discounted return.

    Calling it on a flat reward array (with ``ends`` marking segment ends)
    updates Welford statistics unless ``frozen`` and returns the scaled
    rewards.
    """

    def __init__(self, gamma=0.99, floor=1e-8):
        self.gamma = gamma
        self.floor = floor
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.ret = None
        self.frozen = False

    @property
    def std(self):
        if self.count < 2:
            return 1.0
        return max(np.sqrt(self.m2 / self.count), self.floor)

    def _push(self, x):
        self.count += 1
        d = x - self.mean
        self.mean += d / self.count
        self.m2 += d * (x - self.mean)

    def __call__(self, rewards, ends=None):
        r = np.asarray(rewards, dtype=np.float64)
        if not self.frozen:
            if self.ret is None:
                self.ret = 0.0
            for t, x in enumerate(r):
                self.ret = self.ret * self.gamma + x
                self._push(self.ret)
                if ends is not None and ends[t]:
                    self.ret = 0.0
        return r / self.std


# ---------------------------------------------------------------- archive


@dataclass
class ArchiveEntry:
    policy_index: int
    episodes: np.ndarray  # (n,)
    timesteps: np.ndarray  # (n,)
    stacked: np.ndarray  # (n, STACK * d)
    critic: ap.DenseNet | None = None
    max_points: int = 4096
    seed: int = 0
    _cloud: StateCloud | None = field(default=None, repr=False)

    @property
    def cloud(self):
        if self._cloud is None:
            rng = np.random.default_rng([self.seed, self.policy_index])
            self._cloud = StateCloud(self.stacked).subsample(self.max_points, rng)
        return self._cloud

    @property
    def finals(self):
        """Final raw state of every archived episode."""
        d = self.stacked.shape[1] // STACK
        last = {}
        for k, (e, t) in enumerate(zip(self.episodes, self.timesteps)):
            if e not in last or t > self.timesteps[last[e]]:
                last[e] = k
        rows = [last[e] for e in sorted(last)]
        return self.stacked[rows, -d:]

    @property
    def raw_states(self):
        d = self.stacked.shape[1] // STACK
        return self.stacked[:, -d:]


class Archive:
    """Ordered archive of previous policies' visited stacked states."""

    def __init__(self, max_points=4096, seed=0):
        self.entries = []
        self.max_points = max_points
        self.seed = seed

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, j):
        return self.entries[j]

    def add(self, episodes_of_stacked, critic=None, policy_index=None):
        """Append one policy; ``episodes_of_stacked`` lists (T_e, D) arrays."""
        idx = len(self.entries) if policy_index is None else policy_index
        if self.entries and idx <= self.entries[-1].policy_index:
            raise ValueError("archive entries must be added in discovery order")
        dims = {e.shape[1] for e in episodes_of_stacked}
        if len(dims) != 1:
            raise ValueError("all stacked states must share one dimension")
        eps = np.concatenate([np.full(len(e), k) for k, e in enumerate(episodes_of_stacked)])
        ts = np.concatenate([np.arange(len(e)) for e in episodes_of_stacked])
        entry = ArchiveEntry(idx, eps, ts, np.concatenate(episodes_of_stacked), critic,
                             self.max_points, self.seed)
        self.entries.append(entry)
        return entry

    # line-delimited records plus one critic checkpoint per entry
    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        lines = []
        for entry in self.entries:
            for e, t, s in zip(entry.episodes, entry.timesteps, entry.stacked):
                lines.append(json.dumps({
                    "policy_index": int(entry.policy_index),
                    "episode": int(e),
                    "timestep": int(t),
                    "stacked_state": [float(x) for x in s],
                }))
            if entry.critic is not None:
                ap.save(entry.critic, os.path.join(directory, f"critic_{entry.policy_index}.bin"))
        atomic_write_text(os.path.join(directory, "archive.jsonl"), "\n".join(lines) + "\n")
        atomic_write_text(os.path.join(directory, "archive_meta.json"),
                          json.dumps({"max_points": self.max_points, "seed": self.seed}))

    @classmethod
    def load(cls, directory):
        meta_path = os.path.join(directory, "archive_meta.json")
        meta = {"max_points": 4096, "seed": 0}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta.update(json.load(fh))
        arch = cls(meta["max_points"], meta["seed"])
        groups = {}
        with open(os.path.join(directory, "archive.jsonl")) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    groups.setdefault(rec["policy_index"], []).append(rec)
        for idx in sorted(groups):
            recs = groups[idx]
            critic_path = os.path.join(directory, f"critic_{idx}.bin")
            critic = ap.load(critic_path) if os.path.exists(critic_path) else None
            arch.entries.append(ArchiveEntry(
                idx,
                np.array([r["episode"] for r in recs]),
                np.array([r["timestep"] for r in recs]),
                np.array([r["stacked_state"] for r in recs], dtype=np.float64),
                critic, arch.max_points, arch.seed,
            ))
        return arch


# ---------------------------------------------------------------- model


@dataclass
class IntrinsicConfig:
    variant: str = "rbf"
    sigma2: float = 0.02
    alpha: float = 1.0
    normalize: bool = False
    critic_lr: float = 0.01
    critic_steps: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown intrinsic variant {self.variant!r}")
        if self.sigma2 <= 0 or self.alpha < 0:
            raise ValueError("sigma2 must be positive and alpha non-negative")


class IntrinsicModel:
    """Per-constraint intrinsic rewards against a list of reference clouds.

    ``references`` holds, per constraint, an object with ``cloud`` (stacked
    states) and ``finals`` (final raw states); archive entries qualify, as
    does :class:`LiveReference` for population training.
    """

    def __init__(self, config, references, horizon, critics=None, gamma=0.99):
        self.config = config
        self.references = list(references)
        self.horizon = horizon
        self.critics = list(critics) if critics is not None else [None] * len(self.references)
        self.normalizers = [RunningNormalizer(gamma) for _ in self.references]

    def __len__(self):
        return len(self.references)

    def set_references(self, references):
        if len(references) != len(self.references):
            raise ValueError("reference count is fixed for the life of a model")
        self.references = list(references)

    def rewards(self, stacked, final_mask, raw_dim):
        """Raw intrinsic rewards, shape (n_constraints, T)."""
        T = len(stacked)
        out = np.zeros((len(self.references), T))
        for j, ref in enumerate(self.references):
            if self.config.variant == "rbf":
                out[j] = rbf_reward(stacked, ref.cloud, self.config.sigma2, self.horizon)
            elif self.config.variant == "wd":
                out[j] = wd_reward(stacked, ref.cloud, self.critics[j], self.horizon)
            else:
                idx = np.flatnonzero(final_mask)
                if len(idx):
                    out[j, idx] = final_l2_reward(stacked[idx, -raw_dim:], ref.finals)
        return out

    def normalize(self, raw, ends):
        if not self.config.normalize:
            return raw
        return np.stack([norm(r, ends) for norm, r in zip(self.normalizers, raw)]) if len(raw) else raw

    def freeze(self, frozen=True):
        for n in self.normalizers:
            n.frozen = frozen

    def update_critics(self, stacked):
        if self.config.variant != "wd":
            return
        for j, ref in enumerate(self.references):
            for _ in range(self.config.critic_steps):
                self.critics[j] = critic_update(self.critics[j], stacked, ref.cloud, self.config.critic_lr)


@dataclass
class LiveReference:
    """A reference built from another policy's most recent rollout batch."""

    cloud: StateCloud
    finals: np.ndarray

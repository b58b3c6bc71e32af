"""Population-level evaluation: diversity reports, visit heatmaps, landmark
counts, and the multi-seed drivers behind the reproduction subcommands."""
from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import intrinsic as it
from . import measures as M
from . import trainer as tr


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- diversity


def _aligned(trajs):
    """Pad every trajectory with its last state up to the longest length."""
    n = max(len(t) for t in trajs)
    return [np.vstack([t, np.repeat(t[-1:], n - len(t), axis=0)]) for t in trajs]


def eval_population(archive, k=12, max_points=256, seed=0, measures=("emd", "state_l2")):
    """Pairwise EMD / state-L2 between archive entries plus merged k-NN entropy.

    EMD compares raw-state clouds subsampled to ``max_points``; state L2
    compares each entry's first episode, padded to a common length with its
    final (absorbing) state.
    """
    entries = list(archive.entries if isinstance(archive, it.Archive) else archive)
    if not entries:
        raise EvaluationError("archive is empty")
    merged = np.concatenate([e.raw_states for e in entries])
    if len(merged) < k + 1:
        raise EvaluationError(f"need at least {k + 1} merged states for the entropy estimate")
    report = {"policies": len(entries), "k": k, "entropy": M.knn_entropy(merged, k), "pairwise": {}}
    if len(entries) < 2:
        return report
    n = len(entries)
    if "emd" in measures:
        clouds = [M.StateCloud(e.raw_states).subsample(max_points, np.random.default_rng([seed, j]))
                  for j, e in enumerate(entries)]
        mat = np.zeros((n, n))
        for a, b in itertools.combinations(range(n), 2):
            mat[a, b] = mat[b, a] = M.emd(clouds[a], clouds[b]).cost
        report["pairwise"]["emd"] = mat.tolist()
    if "state_l2" in measures:
        firsts = [e.raw_states[e.episodes == e.episodes.min()] for e in entries]
        firsts = _aligned(firsts)
        mat = np.zeros((n, n))
        for a, b in itertools.combinations(range(n), 2):
            mat[a, b] = mat[b, a] = M.state_l2(firsts[a], firsts[b])
        report["pairwise"]["state_l2"] = mat.tolist()
    return report


# ---------------------------------------------------------------- heatmaps


def export_heatmap(trajectories, resolution, low=0.0, high=1.0):
    """Visit counts of 2-D positions on a ``resolution x resolution`` grid.

    Row index follows the first coordinate. Positions outside
    ``[low, high]`` land in the border cells.
    """
    counts = np.zeros((resolution, resolution), dtype=np.int64)
    for traj in trajectories:
        pts = np.asarray(traj, dtype=np.float64)
        if pts.size == 0:
            continue
        if pts.ndim != 2 or pts.shape[1] < 2:
            raise EvaluationError("trajectories must hold 2-D positions")
        idx = np.floor((pts[:, :2] - low) / (high - low) * resolution).astype(np.int64)
        idx = np.clip(idx, 0, resolution - 1)
        np.add.at(counts, (idx[:, 0], idx[:, 1]), 1)
    return counts


def heatmap_csv(counts):
    return "\n".join(",".join(str(int(c)) for c in row) for row in counts) + "\n"


# ---------------------------------------------------------------- navigation


def touched_landmarks(record):
    return [e.info.get("landmark") if e.info else None for e in record.episodes]


def policy_landmark(record, min_rate=0.5):
    """The landmark a policy goes to, if it touches one in at least ``min_rate``
    of its evaluation episodes; otherwise None."""
    touched = touched_landmarks(record)
    hits = [x for x in touched if x is not None]
    if not hits:
        return None
    top = max(sorted(set(hits)), key=hits.count)
    return top if hits.count(top) >= min_rate * len(touched) else None


def discovered_landmarks(records, min_rate=0.5):
    return sorted({lm for lm in (policy_landmark(r, min_rate) for r in records) if lm is not None})


@dataclass
class FrameworkResult:
    n_landmarks: int
    seeds: list
    itr: list = field(default_factory=list)
    pbt: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    @staticmethod
    def _stats(xs):
        return (float(np.mean(xs)), float(np.std(xs))) if xs else (math.nan, math.nan)

    def summary(self):
        (mi, si), (mp, sp) = self._stats(self.itr), self._stats(self.pbt)
        return {"n_landmarks": self.n_landmarks, "seeds": self.seeds, "itr": self.itr, "pbt": self.pbt,
                "itr_mean": mi, "itr_std": si, "pbt_mean": mp, "pbt_std": sp, "failed": self.failed,
                "seconds": self.seconds, "detail": self.detail}

    def table(self):
        (mi, si), (mp, sp) = self._stats(self.itr), self._stats(self.pbt)
        return f"N_L={self.n_landmarks}  PBT {mp:.2f} ({sp:.2f})  ITR {mi:.2f} ({si:.2f})  seeds={len(self.seeds)}"


def compare_frameworks(run_cfg, seeds, n_landmarks, steps=None, log=None):
    """ITR and PBT on the same navigation layouts; one layout per seed."""
    t0 = time.perf_counter()
    env = replace(run_cfg.env, name="nav", n_landmarks=n_landmarks, seed=None)
    c = env.separation * env.scale
    delta = c * c
    cfg = replace(run_cfg.trainer, population=n_landmarks, delta=delta,
                  steps=steps or run_cfg.trainer.steps,
                  intrinsic=replace(run_cfg.trainer.intrinsic, variant="final-l2",
                                    alpha=1.0 / (run_cfg.trainer.lambda_max * delta)))
    res = FrameworkResult(n_landmarks, list(seeds))
    for algo, runner in (("itr", tr.itr_run), ("pbt", tr.pbt_run)):
        for seed in seeds:
            try:
                run = runner(cfg, env, seed)
            except (tr.TrainingError, FloatingPointError) as exc:
                res.failed.append({"algo": algo, "seed": seed, "error": str(exc)})
                continue
            found = discovered_landmarks(run.records)
            getattr(res, algo).append(len(found))
            res.detail[f"{algo}_{seed}"] = [
                np.bincount([x for x in touched_landmarks(r) if x is not None], minlength=n_landmarks).tolist()
                for r in run.records]
            if log:
                log(f"{algo} seed {seed}: {len(found)} landmarks {found}")
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------- grid world


@dataclass
class GridCheck:
    seed: int
    delta: float
    alpha: float
    returns: list
    emd: list
    r_int: list
    distinct_optimal: int
    seconds: float

    @property
    def passed(self):
        return self.distinct_optimal >= 3

    def to_dict(self):
        return dict(self.__dict__, passed=self.passed)


def largest_diverse_set(ok, dist, threshold):
    """Size of the largest subset of ``ok`` policies with all pairwise
    distances above ``threshold`` (brute force; populations are tiny)."""
    idx = [i for i, good in enumerate(ok) if good]
    for size in range(len(idx), 0, -1):
        for combo in itertools.combinations(idx, size):
            if all(dist[a][b] > threshold for a, b in itertools.combinations(combo, 2)):
                return size
    return 0


def gridworld_check(run_cfg, seed, log=None):
    """Calibrate, run SIPO, then score each policy's greedy path."""
    t0 = time.perf_counter()
    cfg = run_cfg.trainer
    env = replace(run_cfg.env, name="gridworld")
    cal = tr.calibrate(cfg, env, seed, c1=run_cfg.c1, c2=run_cfg.c2)
    cfg = replace(cfg, delta=cal.delta, intrinsic=replace(cfg.intrinsic, alpha=cal.alpha))
    run = tr.itr_run(cfg, env, seed, log=log)
    paths = [r.greedy[0].stacked[:, -2:] for r in run.records]
    rets = [r.greedy[0].ret for r in run.records]
    n = len(paths)
    emd = np.zeros((n, n))
    for a, b in itertools.combinations(range(n), 2):
        emd[a, b] = emd[b, a] = M.emd(M.StateCloud(paths[a]), M.StateCloud(paths[b])).cost
    horizon = env.build(seed, 1)[0].spec.horizon
    r_int = [[tr.intrinsic_return(run.records[i].episodes, run.archive[j], cfg.intrinsic, horizon)
              for j in range(i)] for i in range(n)]
    distinct = largest_diverse_set([r >= 1.0 for r in rets], emd, max(cal.delta, 0.0))
    return GridCheck(seed, cal.delta, cal.alpha, rets, emd.tolist(), r_int, distinct,
                     time.perf_counter() - t0)


def to_json(obj):
    return json.dumps(obj, indent=2, default=float)

"""Exhaustive 1-D check that greedy iterative selection with half the
threshold never loses reward against the best population under the full
threshold.

Policies are points of an evenly spaced grid on [0, 1], the return of a
policy is a piecewise-linear landscape ``J`` and ``D(x, y) = |x - y|``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

# slack on distance comparisons so thresholds that are exact grid multiples count
_EPS = 1e-12


@dataclass
class Instance1D:
    grid: np.ndarray
    J: np.ndarray
    M: int
    delta: float

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.J = np.asarray(self.J, dtype=np.float64)
        if self.grid.shape != self.J.shape or self.grid.ndim != 1:
            raise ValueError("grid and J must be 1-D arrays of equal length")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.M < 1 or len(self.grid) < self.M:
            raise ValueError("need 1 <= M <= N")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    def to_dict(self):
        return {"grid": self.grid.tolist(), "J": self.J.tolist(), "M": self.M, "delta": self.delta}


@dataclass
class Selection:
    value: float | None
    points: tuple = ()

    @property
    def feasible(self):
        return self.value is not None


def _far(d, threshold):
    return d >= threshold - _EPS


def solve_pbt_exact(inst):
    """Maximum total return over M-subsets with pairwise gaps >= delta.

    DP over sorted points: ``best[c][i]`` is the best total of ``c`` picks
    whose largest is point ``i``; predecessors come from a prefix maximum.
    Ties resolve toward smaller coordinates.
    """
    x, J, M = inst.grid, inst.J, inst.M
    n = len(x)
    # lim[i]: number of points at least delta to the left of point i
    lim = np.searchsorted(x, x - inst.delta + _EPS, side="right")
    best = np.full((M + 1, n), -np.inf)
    back = np.full((M + 1, n), -1, dtype=np.int64)
    best[1] = J
    for c in range(2, M + 1):
        prev = best[c - 1]
        run_val, run_arg = -np.inf, -1
        prefix_val = np.empty(n)
        prefix_arg = np.empty(n, dtype=np.int64)
        for p in range(n):
            if prev[p] > run_val:
                run_val, run_arg = prev[p], p
            prefix_val[p], prefix_arg[p] = run_val, run_arg
        for i in range(n):
            if lim[i] > 0 and prefix_val[lim[i] - 1] > -np.inf:
                best[c, i] = J[i] + prefix_val[lim[i] - 1]
                back[c, i] = prefix_arg[lim[i] - 1]
    last = int(np.argmax(best[M]))
    if not np.isfinite(best[M, last]):
        return Selection(None)
    picks = [last]
    for c in range(M, 1, -1):
        picks.append(int(back[c, picks[-1]]))
    picks.reverse()
    return Selection(float(J[picks].sum()), tuple(float(x[i]) for i in picks))


def solve_pbt_bruteforce(inst):
    """Enumerate every M-subset; for cross-checking the DP."""
    x, J = inst.grid, inst.J
    best, arg = None, ()
    for combo in itertools.combinations(range(len(x)), inst.M):
        if all(_far(x[b] - x[a], inst.delta) for a, b in zip(combo, combo[1:])):
            v = float(J[list(combo)].sum())
            if best is None or v > best:
                best, arg = v, tuple(float(x[i]) for i in combo)
    return Selection(best, arg)


def solve_itr_greedy(inst, threshold=None):
    """Pick, M times, the best point at least ``threshold`` from all earlier picks."""
    threshold = inst.delta if threshold is None else threshold
    x, J = inst.grid, inst.J
    allowed = np.ones(len(x), dtype=bool)
    picks = []
    for _ in range(inst.M):
        if not allowed.any():
            return Selection(None, tuple(float(x[i]) for i in picks))
        masked = np.where(allowed, J, -np.inf)
        i = int(np.argmax(masked))
        picks.append(i)
        allowed &= _far(np.abs(x - x[i]), threshold)
    return Selection(float(J[picks].sum()), tuple(float(x[i]) for i in picks))


# ---------------------------------------------------------------- instances


def random_landscape(rng, grid, n_peaks):
    """Piecewise-linear J: random peaks in [0.2, 1] separated by low valleys."""
    peaks = np.sort(rng.uniform(0.0, 1.0, n_peaks))
    knots_x = [0.0]
    knots_y = [rng.uniform(0.0, 0.2)]
    for k, p in enumerate(peaks):
        if k > 0:
            knots_x.append(rng.uniform(peaks[k - 1], p))
            knots_y.append(rng.uniform(0.0, 0.2))
        knots_x.append(p)
        knots_y.append(rng.uniform(0.2, 1.0))
    knots_x.append(1.0)
    knots_y.append(rng.uniform(0.0, 0.2))
    return np.interp(grid, knots_x, knots_y)


def random_instance(rng, n_points=200, delta=None):
    grid = np.linspace(0.0, 1.0, n_points)
    M = int(rng.integers(2, 6))
    J = random_landscape(rng, grid, int(rng.integers(3, 9)))
    if delta is None:
        # (M - 1) * delta <= 1 keeps the population problem feasible on [0, 1]
        delta = float(rng.uniform(0.01, 1.0 / (M - 1)))
    return Instance1D(grid, J, M, delta)


def worst_case_instance(delta=0.2, n_points=201):
    """A tall central peak flanked by two slightly lower peaks ``delta/2`` away.

    With the full threshold the greedy pick of the centre blocks both flanks;
    with half the threshold it can take a flank.
    """
    grid = np.linspace(0.0, 1.0, n_points)
    w = delta / 8.0
    xs = [0.0, 0.5 - delta / 2 - w, 0.5 - delta / 2, 0.5 - delta / 2 + w,
          0.5 - w, 0.5, 0.5 + w,
          0.5 + delta / 2 - w, 0.5 + delta / 2, 0.5 + delta / 2 + w, 1.0]
    ys = [0.1, 0.1, 0.9, 0.1, 0.1, 1.0, 0.1, 0.1, 0.9, 0.1, 0.1]
    return Instance1D(grid, np.interp(grid, xs, ys), 2, delta)


# ---------------------------------------------------------------- verification


@dataclass
class BoundReport:
    instances: int = 0
    passes: int = 0
    infeasible: int = 0
    itr_full_threshold_below_pbt: int = 0
    violations: list = field(default_factory=list)

    def to_dict(self):
        return {
            "instances": self.instances,
            "passes": self.passes,
            "infeasible": self.infeasible,
            "itr_full_threshold_below_pbt": self.itr_full_threshold_below_pbt,
            "violations": self.violations,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def verify_greedy_bound(n_instances, rng, n_points=200, delta=None):
    """Check ``ITR(delta/2) >= PBT(delta)`` on random instances.

    Instances where even the population problem is infeasible are counted
    separately; an infeasible greedy run against a feasible population is a
    violation.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    report = BoundReport()
    for _ in range(n_instances):
        inst = random_instance(rng, n_points, delta)
        report.instances += 1
        t1 = solve_pbt_exact(inst)
        if not t1.feasible:
            report.infeasible += 1
            continue
        t2 = solve_itr_greedy(inst, inst.delta / 2.0)
        if t2.feasible and t2.value >= t1.value - 1e-9:
            report.passes += 1
        else:
            report.violations.append({"instance": inst.to_dict(), "T1": t1.value, "T2": t2.value})
        full = solve_itr_greedy(inst, inst.delta)
        if not full.feasible or full.value < t1.value - 1e-9:
            report.itr_full_threshold_below_pbt += 1
    return report

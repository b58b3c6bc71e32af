"""The 5x5 grid-world policy example and its diversity-measure table.

Three optimal policies: two staircases hugging the diagonal (``P1``, ``P2``)
and one along the top and right boundary (``P3``). Each policy is an arrow
field over every state visited by any of the three; off-path arrows are the
ones that make the per-state comparisons of the reference table hold.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import measures as M
from .environments import DOWN, RIGHT

GRID = 5
MOVES = {"P1": "RDDRRDDR", "P2": "DRRDDRRD", "P3": "RRRRDDDD"}
_CODE = {"R": RIGHT, "D": DOWN}

# arrows on states the policy itself never visits
_OFF_PATH = {
    "P1": {(1, 0): "R", (1, 2): "D", (3, 2): "R", (3, 4): "D",
           (0, 2): "R", (0, 3): "R", (0, 4): "D", (1, 4): "D", (2, 4): "D"},
    "P2": {(0, 1): "D", (2, 1): "R", (2, 3): "D", (4, 3): "R",
           (0, 2): "D", (0, 3): "D", (0, 4): "R", (1, 4): "D", (2, 4): "D"},
    "P3": {(1, 1): "D", (2, 1): "R", (2, 2): "R", (2, 3): "D", (3, 3): "D", (4, 3): "R",
           (1, 0): "R", (1, 2): "D", (3, 2): "R"},
}

# unit disagreement per state: the two arrows sit 1 apart
EMBEDDING = {RIGHT: np.array([1.0, 0.0]) / math.sqrt(2.0), DOWN: np.array([0.0, -1.0]) / math.sqrt(2.0)}


def path_states(moves):
    r = c = 0
    out = [(0, 0)]
    for m in moves:
        if m == "R":
            c += 1
        else:
            r += 1
        out.append((r, c))
    return out


def decision_states(name):
    return path_states(MOVES[name])[:-1]


def arrow_field(name):
    field = {s: _CODE[m] for s, m in zip(decision_states(name), MOVES[name])}
    for s, m in _OFF_PATH[name].items():
        field.setdefault(s, _CODE[m])
    return field


def tabular(name):
    return M.one_hot_policy(arrow_field(name), 4)


def union_states():
    seen = []
    for name in MOVES:
        for s in decision_states(name):
            if s not in seen:
                seen.append(s)
    return seen


def interior_cloud(name):
    return M.StateCloud(np.array(path_states(MOVES[name])[1:-1], dtype=float))


def _row(a, b):
    pa, pb = tabular(a), tabular(b)
    ta, tb = decision_states(a), decision_states(b)
    traj_a = [(s, arrow_field(a)[s]) for s in ta]
    traj_b = [(s, arrow_field(b)[s]) for s in tb]
    interior = len(path_states(MOVES[a])) - 2
    plan = M.emd(interior_cloud(a), interior_cloud(b))
    return {
        "KL": M.kl_policies(pa, pb, ta + tb),
        "JSD1": M.jsd1(pa, pb, [(traj_a, 1.0)], [(traj_b, 1.0)]),
        "JSD0": M.jsd0(pa, pb, ta, tb),
        "action_L2": M.action_l2(pa, pb, union_states(), EMBEDDING),
        "state_L2": M.state_l2(path_states(MOVES[a]), path_states(MOVES[b])),
        # the table's program puts unit mass on each interior state
        "state_EMD": interior * plan.cost,
    }


@dataclass
class Cell:
    pair: str
    measure: str
    value: float
    expected: float
    tol: float

    @property
    def passed(self):
        if math.isinf(self.expected):
            return math.isinf(self.value) and self.value > 0
        return abs(self.value - self.expected) <= self.tol


EXPECTED = {
    "P1-P2": {"KL": math.inf, "JSD1": math.log(2), "JSD0": 0.5, "action_L2": math.sqrt(7),
              "state_L2": 2 * math.sqrt(2), "state_EMD": 5.7},
    "P1-P3": {"KL": math.inf, "JSD1": math.log(2), "JSD0": 0.125, "action_L2": 1.0,
              "state_L2": 2 * math.sqrt(6), "state_EMD": 11.3},
}
TOL = {"state_EMD": 0.05}


def reproduce():
    """Compute every table cell; returns ``(cells, seconds)``."""
    t0 = time.perf_counter()
    cells = []
    for pair, exp in EXPECTED.items():
        a, b = pair.split("-")
        got = _row(a, b)
        for measure, expected in exp.items():
            cells.append(Cell(pair, measure, got[measure], expected, TOL.get(measure, 1e-9)))
    return cells, time.perf_counter() - t0


def format_report(cells, seconds):
    lines = [f"{'pair':<6} {'measure':<10} {'value':>10} {'expected':>10}  result"]
    for c in cells:
        lines.append(f"{c.pair:<6} {c.measure:<10} {c.value:>10.4f} {c.expected:>10.4f}  "
                     f"{'PASS' if c.passed else 'FAIL'}")
    lines.append(f"runtime {seconds:.3f}s")
    return "\n".join(lines)

"""Diversity measures between policies.

Action-distribution measures (KL, JSD_0, JSD_1, action L2) operate on tabular
policies, i.e. mappings ``state -> probability vector`` (deterministic
policies are one-hot). State-distance measures (state L2, EMD) and the k-NN
entropy estimator operate on point clouds of states.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from . import kernels


class TransportError(RuntimeError):
    pass


@dataclass
class StateCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("a StateCloud needs a non-empty (n, d) array of points")
        self.points = pts
        if self.weights is None:
            self.weights = np.full(len(pts), 1.0 / len(pts))
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(pts),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be non-negative, one per point, summing to 1")
            self.weights = w

    def __len__(self):
        return len(self.points)

    @property
    def dim(self):
        return self.points.shape[1]

    def subsample(self, max_points, rng):
        if len(self) <= max_points:
            return self
        idx = np.sort(rng.choice(len(self), size=max_points, replace=False))
        w = self.weights[idx]
        return StateCloud(self.points[idx], w / w.sum())


@dataclass
class TransportPlan:
    coupling: np.ndarray
    cost: float


# ---------------------------------------------------------------- action-based


def kl_action(p, q):
    """KL(p || q) for two distributions over the same finite action set."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share an action set")
    support = p > 0
    if np.any(q[support] == 0):
        return math.inf
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def one_hot_policy(actions, n_actions):
    """Tabular deterministic policy from a ``state -> action index`` mapping."""
    eye = np.eye(n_actions)
    return {s: eye[a] for s, a in actions.items()}


def kl_policies(pi_i, pi_j, states):
    """Mean per-state KL over ``states`` (the joint occupancy, repeats allowed)."""
    return float(np.mean([kl_action(pi_i[s], pi_j[s]) for s in states]))


def _greedy(pi, s):
    return int(np.argmax(pi[s]))


def jsd0(pi_i, pi_j, traj_i, traj_j):
    """Fraction of visited decision states on which two deterministic policies
    disagree. ``traj_*`` are the state sequences each policy acts in."""
    states = list(traj_i) + list(traj_j)
    if not states:
        return 0.0
    return sum(_greedy(pi_i, s) != _greedy(pi_j, s) for s in states) / len(states)


def trajectory_probability(pi, traj):
    """Probability that ``pi`` produces the (state, action) sequence ``traj``."""
    prob = 1.0
    for s, a in traj:
        prob *= float(pi[s][a])
        if prob == 0.0:
            break
    return prob


def jsd1(pi_i, pi_j, trajs_i, trajs_j):
    """JSD with unit trajectory discount.

    ``trajs_i`` lists ``(trajectory, P(trajectory | pi_i))`` pairs; each
    trajectory is a sequence of ``(state, action)`` pairs.
    """

    def half(pi_a, pi_b, trajs):
        total = 0.0
        for traj, weight in trajs:
            if weight == 0.0:
                continue
            pa = trajectory_probability(pi_a, traj)
            pb = trajectory_probability(pi_b, traj)
            # the per-timestep average of a trajectory-level term is the term
            total += weight * math.log((pa + pb) / (2.0 * pa))
        return -0.5 * total

    return half(pi_i, pi_j, trajs_i) + half(pi_j, pi_i, trajs_j)


def action_l2(pi_i, pi_j, states, embedding):
    """L2 norm of concatenated per-state differences of action embeddings."""
    diffs = [np.asarray(embedding[_greedy(pi_i, s)]) - np.asarray(embedding[_greedy(pi_j, s)])
             for s in states]
    if not diffs:
        return 0.0
    return float(np.linalg.norm(np.concatenate(diffs)))


# ---------------------------------------------------------------- state-based


def state_l2(traj_i, traj_j):
    """L2 norm between two time-aligned state sequences."""
    a = np.asarray(traj_i, dtype=np.float64)
    b = np.asarray(traj_j, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm((a - b).ravel()))


def cost_matrix(source, target, metric=None):
    a, b = source.points, target.points
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds must share a dimension")
    if metric is None:
        diff = a[:, None, :] - b[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return np.array([[float(metric(x, y)) for y in b] for x in a])


def emd(source, target, metric=None):
    """Exact optimal transport between two weighted clouds.

    ``metric`` maps a point pair to a cost; Euclidean distance by default.
    """
    cost = cost_matrix(source, target, metric)
    if not np.all(np.isfinite(cost)):
        raise ValueError("metric must be finite on all pairs")
    coupling = transport_simplex(source.weights, target.weights, cost)
    return TransportPlan(coupling, float(np.sum(coupling * cost)))


def transport_simplex(supply, demand, cost, tol=1e-12, max_iter=None):
    """Primal simplex (MODI / u-v method) on the transportation polytope.

    Starts from a least-cost basic solution completed to a spanning tree and
    pivots on the most negative reduced cost, switching to Bland's rule
    during long runs of degenerate pivots.
    """
    a = np.asarray(supply, dtype=np.float64)
    b = np.asarray(demand, dtype=np.float64)
    C = np.asarray(cost, dtype=np.float64)
    n, m = C.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("marginals do not match the cost matrix")
    if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
        raise TransportError("unbalanced marginals")
    flow, basis = _least_cost_basis(a, b, C, tol)
    if max_iter is None:
        max_iter = 50 * (n + m) * max(n, m) + 1000
    scale = max(1.0, float(np.abs(C).max()))
    degenerate_run = 0
    for _ in range(max_iter):
        u, v = _potentials(basis, C, n, m)
        reduced = C - u[:, None] - v[None, :]
        if degenerate_run > n + m:
            candidates = np.flatnonzero(reduced.ravel() < -1e-12 * scale)
            if candidates.size == 0:
                break
            enter = int(candidates[0])
        else:
            enter = int(np.argmin(reduced))
            if reduced.flat[enter] >= -1e-12 * scale:
                break
        ei, ej = divmod(enter, m)
        cycle = _tree_path(basis, ei, n + ej, n, m)
        minus = cycle[0::2]
        theta = min(flow[cell] for cell in minus)
        leave = next(cell for cell in minus if flow[cell] == theta)
        for k, cell in enumerate(cycle):
            flow[cell] += -theta if k % 2 == 0 else theta
        del flow[leave]
        basis.discard(leave)
        flow[(ei, ej)] = theta
        basis.add((ei, ej))
        degenerate_run = degenerate_run + 1 if theta <= tol else 0
    else:
        raise TransportError("transport simplex did not converge")
    gamma = np.zeros((n, m))
    for (i, j), f in flow.items():
        gamma[i, j] = max(f, 0.0)
    return gamma


def _least_cost_basis(a, b, C, tol):
    n, m = C.shape
    s, d = a.copy(), b.copy()
    flow = {}
    parent = list(range(n + m))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    thresh = tol * max(1.0, a.sum())
    for idx in np.argsort(C, axis=None, kind="stable"):
        i, j = divmod(int(idx), m)
        if s[i] <= thresh or d[j] <= thresh:
            continue
        x = min(s[i], d[j])
        flow[(i, j)] = x
        s[i] -= x
        d[j] -= x
        if s[i] <= thresh:
            s[i] = 0.0
        if d[j] <= thresh:
            d[j] = 0.0
        parent[find(i)] = find(n + j)
    # complete the forest to a spanning tree with zero-flow cells
    if len(flow) < n + m - 1:
        for idx in np.argsort(C, axis=None, kind="stable"):
            i, j = divmod(int(idx), m)
            ri, rj = find(i), find(n + j)
            if ri != rj and (i, j) not in flow:
                flow[(i, j)] = 0.0
                parent[ri] = rj
                if len(flow) == n + m - 1:
                    break
    return flow, set(flow)


def _adjacency(basis, n, m):
    adj = [[] for _ in range(n + m)]
    for i, j in basis:
        adj[i].append(n + j)
        adj[n + j].append(i)
    return adj


def _potentials(basis, C, n, m):
    adj = _adjacency(basis, n, m)
    pot = np.full(n + m, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        x = queue.popleft()
        for y in adj[x]:
            if np.isnan(pot[y]):
                pot[y] = C[x, y - n] - pot[x] if x < n else C[y, x - n] - pot[x]
                queue.append(y)
    return pot[:n], pot[n:]


def _tree_path(basis, row, col_node, n, m):
    """Cells on the tree path from ``row`` to ``col_node``, ordered from the
    column end; entries at even positions lose flow when the entering cell
    ``(row, col_node - n)`` gains it."""
    adj = _adjacency(basis, n, m)
    parent = {row: None}
    queue = deque([row])
    while queue and col_node not in parent:
        x = queue.popleft()
        for y in adj[x]:
            if y not in parent:
                parent[y] = x
                queue.append(y)
    if col_node not in parent:
        raise TransportError("basis is not a spanning tree")
    cells = []
    x = col_node
    while parent[x] is not None:
        p = parent[x]
        cells.append((p, x - n) if p < n else (x, p - n))
        x = p
    return cells


# ---------------------------------------------------------------- entropy


def knn_entropy(points, k=12, eps=1e-10):
    """k-nearest-neighbour differential entropy estimate (nats).

    ``(d/N) sum log R_k(i) + log N + log V_d - psi(k)`` with ``V_d`` the unit
    ball volume; neighbour distances are floored at ``eps`` so duplicated
    points stay finite.
    """
    if isinstance(points, StateCloud):
        points = points.points
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    r = np.maximum(kernels.kth_neighbor_distances(x, k), eps)
    log_unit_ball = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0)
    return float(d * np.mean(np.log(r)) + math.log(n) + log_unit_ball - digamma(k))

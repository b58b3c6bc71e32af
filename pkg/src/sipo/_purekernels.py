"""NumPy implementations of the hot numerical kernels.

These mirror ``_kernels.pyx`` one-to-one and are used whenever the compiled
extension is unavailable (or ``SIPO_PURE_PYTHON=1`` is set).
"""
import numpy as np

# rows per block; keeps the (rows, m, d) difference tensor around 30 MB
_BLOCK_ELEMS = 4_000_000


def _rows_per_block(m, d):
    return max(1, _BLOCK_ELEMS // max(1, m * d))


def rbf_similarity(queries, cloud, sigma2):
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    cloud = np.ascontiguousarray(cloud, dtype=np.float64)
    n, d = queries.shape
    out = np.empty(n)
    inv = 1.0 / (2.0 * sigma2)
    step = _rows_per_block(cloud.shape[0], d)
    for lo in range(0, n, step):
        diff = queries[lo:lo + step, None, :] - cloud[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        out[lo:lo + step] = np.exp(-sq * inv).mean(axis=1)
    return out


def kth_neighbor_distances(points, k):
    points = np.ascontiguousarray(points, dtype=np.float64)
    n, d = points.shape
    out = np.empty(n)
    step = _rows_per_block(n, d)
    for lo in range(0, n, step):
        diff = points[lo:lo + step, None, :] - points[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        rows = np.arange(sq.shape[0])
        sq[rows, lo + rows] = np.inf
        out[lo:lo + step] = np.sqrt(np.partition(sq, k - 1, axis=1)[:, k - 1])
    return out


def gae(rewards, values, next_values, ends, gamma, lam):
    n = len(rewards)
    adv = np.empty(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        if ends[t]:
            running = 0.0
        running = delta + gamma * lam * running
        adv[t] = running
    return adv

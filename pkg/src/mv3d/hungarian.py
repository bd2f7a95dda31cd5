"""Minimum-cost bipartite assignment (Hungarian / shortest augmenting path)."""

from __future__ import annotations

import itertools
import math

import numpy as np


class CostError(ValueError):
    pass


def _solve_rows_le_cols(cost: np.ndarray) -> np.ndarray:
    """Column for each row of an ``n x m`` matrix with ``n <= m``.

    Classic O(n^2 m) potentials formulation: rows are added one at a time
    and an augmenting path is grown along tight edges with Dijkstra-like
    slack updates.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    row_of = np.zeros(m + 1, dtype=int)  # row_of[j] = 1-based row matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[row_of[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = np.full(n, -1, dtype=int)
    for j in range(1, m + 1):
        if row_of[j]:
            col_of[row_of[j] - 1] = j - 1
    return col_of


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum total-cost one-to-one assignment of ``min(N_pred, N_gt)`` pairs.

    Returns ``(pred_index, gt_index)`` pairs sorted by prediction index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise CostError(f"cost must be a matrix, got shape {c.shape}")
    if np.isnan(c).any():
        raise CostError("cost matrix contains NaN")
    if not np.isfinite(c).all():
        raise CostError("cost matrix contains infinite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    if n <= m:
        cols = _solve_rows_le_cols(c)
        return [(i, int(cols[i])) for i in range(n)]
    rows = _solve_rows_le_cols(c.T)
    return sorted((int(rows[j]), j) for j in range(m))


def assignment_cost(cost, pairs) -> float:
    """Exactly rounded total cost of ``pairs`` (order independent)."""
    c = np.asarray(cost)
    return math.fsum(float(c[i, j]) for i, j in pairs)


def brute_force_match(cost) -> tuple[float, list[tuple[int, int]]]:
    """Enumerate every injective assignment; for small matrices only."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    best, best_pairs = math.inf, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            pairs = list(zip(range(n), perm))
            total = assignment_cost(c, pairs)
            if total < best:
                best, best_pairs = total, pairs
    else:
        for perm in itertools.permutations(range(n), m):
            pairs = sorted(zip(perm, range(m)))
            total = assignment_cost(c, pairs)
            if total < best:
                best, best_pairs = total, pairs
    return best, best_pairs

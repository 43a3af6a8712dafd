"""Minimum-cost bipartite assignment via the Hungarian algorithm.

Potential form with shortest augmenting paths: rows are inserted one at a
time, each insertion grows an alternating tree until it reaches a free
column. O(rows^2 * cols) with the column scan vectorized.
"""

from __future__ import annotations

import numpy as np

from .numcore import NumericsError, ShapeError


def min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Columns assigned to each row of ``cost`` minimizing the total.

    ``cost`` must be 2-d with rows <= cols and finite entries. The result
    is an intp array ``cols`` with ``cols[i]`` the column matched to row
    ``i``; columns are distinct. Ties between equal-cost optima resolve
    arbitrarily but deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-d, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ShapeError("cost matrix must be non-empty")
    if n > m:
        raise ShapeError(f"need rows <= cols, got {n}x{m}; pad or transpose first")
    if not np.all(np.isfinite(cost)):
        raise NumericsError("cost matrix contains non-finite entries")

    # column 0 is a virtual root; real columns live at 1..m
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # row matched to each column, 0 = free
    parent = np.zeros(m + 1, dtype=np.intp)

    padded = np.empty((n + 1, m + 1))
    padded[1:, 1:] = cost

    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used
            free[0] = False
            reduced = padded[i0, free] - u[i0] - v[free]
            better = reduced < minv[free]
            idx = np.flatnonzero(free)
            shrink = idx[better]
            minv[shrink] = reduced[better]
            parent[shrink] = j0
            j1 = idx[np.argmin(minv[idx])]
            delta = minv[j1]
            u[match[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = parent[j0]
            match[j0] = match[j1]
            j0 = j1

    cols = np.empty(n, dtype=np.intp)
    for j in range(1, m + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    return cols


def assignment_total(cost: np.ndarray, cols: np.ndarray) -> float:
    """Total cost of assigning row i to cols[i] (row-order summation)."""
    cost = np.asarray(cost)
    return float(cost[np.arange(len(cols)), cols].sum())

"""Linear assignment helpers."""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment


def hungarian(cost):
    """Minimum-cost injective assignment of the rows of ``cost`` to columns.

    Requires rows <= columns.  Returns (row_indices, col_indices) sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.shape[0] > cost.shape[1]:
        raise ValueError(f"cannot assign {cost.shape[0]} rows to {cost.shape[1]} columns")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def brute_force_assignment(cost):
    """Exhaustive search over all injections; only for tiny problems."""
    cost = np.asarray(cost, dtype=np.float64)
    n, k = cost.shape
    best, best_cols = np.inf, None
    for cols in itertools.permutations(range(k), n):
        total = cost[np.arange(n), list(cols)].sum()
        if total < best:
            best, best_cols = total, cols
    return best, np.asarray(best_cols if best_cols is not None else (), dtype=np.int64)

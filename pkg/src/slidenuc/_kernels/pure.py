"""Pure numpy kernels, used when the compiled extension is unavailable.

Must stay behaviourally identical to ``_native``: same optima, same
deterministic tie-breaks (lowest row, then lowest column).
"""

from __future__ import annotations

import numpy as np

__all__ = ["solve_dense", "keep_in_rect"]


def solve_dense(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimum-cost one-to-one assignment on a dense rectangular matrix.

    Shortest-augmenting-path method with row/column potentials. Every row
    (or column, whichever side is smaller) ends up assigned, so the result
    has ``min(n, m)`` pairs. Entries must be finite; encode forbidden pairs
    with a large sentinel and drop them afterwards.

    Returns (rows, cols, total) with rows ascending.
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = a.shape
    if n == 0 or m == 0:
        return np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp), 0.0
    if not np.isfinite(a).all():
        raise ValueError("cost matrix entries must be finite")

    transposed = n > m
    if transposed:
        a = a.T
        n, m = m, n

    # 1-based arrays; p[j] = row matched to column j, 0 = free.
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)
    way = np.zeros(m + 1, dtype=np.intp)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = a[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            upd = free & (cur < minv[1:])
            if upd.any():
                minv[1:][upd] = cur[upd]
                way[1:][upd] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1  # first minimum: lowest column wins ties
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    cols = np.nonzero(p[1:])[0]
    rows = p[1:][cols] - 1
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    rows = rows[order].astype(np.intp)
    cols = cols[order].astype(np.intp)
    total = float(np.asarray(cost, dtype=np.float64)[rows, cols].sum())
    return rows, cols, total


def keep_in_rect(
    x: np.ndarray,
    y: np.ndarray,
    x_lo: float,
    x_hi: float,
    y_lo: float,
    y_hi: float,
) -> np.ndarray:
    """Half-open containment mask: lo <= coord < hi on both axes."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (x >= x_lo) & (x < x_hi) & (y >= y_lo) & (y < y_hi)

"""Minimum-cost perfect matching between equal-size point sets.

Two solvers over a dense cost matrix:

* :func:`hungarian` -- exact, shortest augmenting path with row/column
  potentials, O(n^3).
* :func:`auction` -- Bertsekas' forward auction with epsilon scaling. It
  stops as soon as a duality-gap certificate shows the assignment is within
  a relative tolerance of optimal.

The inner loops are compiled with numba; everything else is plain numpy.
"""
from __future__ import annotations

import numba
import numpy as np


class AssignmentError(RuntimeError):
    pass


@numba.njit(cache=True)
def _hungarian_kernel(cost):
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Return ``perm`` minimising ``sum(cost[i, perm[i]])`` for a square matrix."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    return _hungarian_kernel(cost)


@numba.njit(cache=True)
def _auction_phase(benefit, prices, eps, max_bids):
    # Gauss-Seidel forward auction; returns (owner-of-row, bids used)
    n = benefit.shape[0]
    row_to_col = np.full(n, -1, dtype=np.int64)
    col_to_row = np.full(n, -1, dtype=np.int64)
    queue = np.arange(n)
    head = 0
    tail = n
    qbuf = np.empty(2 * n + 1, dtype=np.int64)
    qbuf[:n] = queue
    cap = qbuf.shape[0]
    bids = 0
    unassigned = n
    while unassigned > 0:
        if bids >= max_bids:
            return row_to_col, -bids
        i = qbuf[head % cap]
        head += 1
        best = -np.inf
        second = -np.inf
        best_j = -1
        for j in range(n):
            val = benefit[i, j] - prices[j]
            if val > best:
                second = best
                best = val
                best_j = j
            elif val > second:
                second = val
        if n == 1:
            second = best
        prices[best_j] += best - second + eps
        prev = col_to_row[best_j]
        col_to_row[best_j] = i
        row_to_col[i] = best_j
        if prev >= 0:
            row_to_col[prev] = -1
            qbuf[tail % cap] = prev
            tail += 1
        else:
            unassigned -= 1
        bids += 1
    return row_to_col, bids


def assignment_cost(cost: np.ndarray, perm: np.ndarray) -> float:
    """Sum of ``cost[i, perm[i]]`` in row order."""
    return float(np.sum(cost[np.arange(len(perm)), perm]))


def auction(cost: np.ndarray, rel_tol: float = 1e-3, scale_factor: float = 5.0,
            max_bids: int = 50_000_000) -> tuple[np.ndarray, float]:
    """Near-optimal assignment by epsilon-scaled auction.

    Returns ``(perm, lower_bound)``; the certificate guarantees
    ``assignment_cost(cost, perm) <= (1 + rel_tol) * lower_bound`` unless the
    final epsilon already pins the gap below ``n * eps_min``. ``lower_bound``
    is a dual bound on the optimal cost.
    """
    if not rel_tol > 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    benefit = -cost
    prices = np.zeros(n)
    cmax = float(cost.max() - cost.min())
    eps = max(cmax / 4.0, 1e-300)
    eps_min = max(cmax, 1.0) * 1e-12 / n
    total_bids = 0
    while True:
        perm, bids = _auction_phase(benefit, prices, eps, max_bids - total_bids)
        if bids < 0:
            raise AssignmentError(
                f"auction did not converge within {max_bids} bids (eps={eps:.3g}, n={n})")
        total_bids += bids
        primal = assignment_cost(cost, perm)
        # weak duality: sum_i max_j (b_ij - p_j) + sum_j p_j bounds the max benefit
        dual = float(np.sum(np.max(benefit - prices[None, :], axis=1)) + np.sum(prices))
        lower = max(-dual, 0.0) if cost.min() >= 0 else -dual
        if primal <= 0.0 or primal - lower <= rel_tol * lower or n * eps <= rel_tol * lower:
            return perm, lower
        if eps <= eps_min:
            return perm, lower
        eps = max(eps / scale_factor, eps_min)

"""Balanced KD-tree for exact nearest-neighbour queries in R^3."""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def _query_kernel(queries, points, order, split_dim, split_val, left, right, lo, hi):
    m = queries.shape[0]
    out_idx = np.empty(m, dtype=np.int64)
    out_d = np.empty(m)
    stack = np.empty(128, dtype=np.int64)
    for qi in range(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        best = np.inf
        best_i = -1
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if left[node] < 0:
                for k in range(lo[node], hi[node]):
                    pi = order[k]
                    dx = qx - points[pi, 0]
                    dy = qy - points[pi, 1]
                    dz = qz - points[pi, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < best or (d == best and pi < best_i):
                        best = d
                        best_i = pi
                continue
            diff = queries[qi, split_dim[node]] - split_val[node]
            if diff <= 0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            # ties on the far side may carry a lower index, so prune only on strict >
            if diff * diff <= best:
                stack[top] = far
                top += 1
            stack[top] = near
            top += 1
        out_idx[qi] = best_i
        out_d[qi] = best
    return out_idx, out_d


class KDTree:
    """Immutable KD-tree over a fixed (N, 3) point array.

    Splits on the axis of largest spread at the median, so depth is
    O(log N). ``query`` returns the nearest point index (lowest index on
    exact ties) and the squared distance.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
            raise ValueError(f"KDTree needs a non-empty (N, 3) array, got shape {pts.shape}")
        self.points = pts
        self.leaf_size = max(1, int(leaf_size))
        order = np.arange(len(pts))
        split_dim, split_val, left, right, lo, hi = [], [], [], [], [], []

        def build(start, stop):
            node = len(split_dim)
            split_dim.append(0)
            split_val.append(0.0)
            left.append(-1)
            right.append(-1)
            lo.append(start)
            hi.append(stop)
            if stop - start <= self.leaf_size:
                return node
            sub = pts[order[start:stop]]
            axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
            mid = (stop - start) // 2
            part = np.argsort(sub[:, axis], kind="stable")
            order[start:stop] = order[start:stop][part]
            split_dim[node] = axis
            split_val[node] = float(pts[order[start + mid - 1], axis])
            left[node] = build(start, start + mid)
            right[node] = build(start + mid, stop)
            return node

        build(0, len(pts))
        self.order = order
        self.split_dim = np.array(split_dim, dtype=np.int64)
        self.split_val = np.array(split_val, dtype=np.float64)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.lo = np.array(lo, dtype=np.int64)
        self.hi = np.array(hi, dtype=np.int64)

    def __len__(self):
        return len(self.points)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
        return _query_kernel(q, self.points, self.order, self.split_dim, self.split_val,
                             self.left, self.right, self.lo, self.hi)

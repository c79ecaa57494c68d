"""Point-set distances: CD, UCD, UHD and EMD, plus the CSV metric report.

Nearest-neighbour terms use squared Euclidean distance. EMD uses the
unsquared per-pair distance averaged over points.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import assignment_cost, auction, hungarian
from .kdtree import KDTree
from .pointcloud import as_points

EXACT_EMD_MAX_POINTS = 512
# brute force is faster than building a tree below this many distance pairs
_BRUTE_FORCE_PAIRS = 1 << 18


def _check_nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise ValueError("metrics need non-empty point clouds")


def pairwise_sq_dists(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    diff = P[:, None, :] - Q[None, :, :]
    return diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2


def nearest_brute(P, Q) -> tuple[np.ndarray, np.ndarray]:
    """For each p in P: index of its nearest q (lowest on ties) and the squared distance."""
    P, Q = as_points(P), as_points(Q)
    _check_nonempty(P, Q)
    d = pairwise_sq_dists(P, Q)
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(len(P)), idx]


def nearest(P, Q, tree: KDTree | None = None) -> tuple[np.ndarray, np.ndarray]:
    P, Q = as_points(P), as_points(Q)
    _check_nonempty(P, Q)
    if tree is None and len(P) * len(Q) <= _BRUTE_FORCE_PAIRS:
        return nearest_brute(P, Q)
    return (tree or KDTree(Q)).query(P)


def chamfer(P, Q) -> float:
    """Symmetric Chamfer distance: mean squared NN distance in both directions."""
    P, Q = as_points(P), as_points(Q)
    return float(nearest(P, Q)[1].mean() + nearest(Q, P)[1].mean())


def ucd(P_src, Q_tgt) -> float:
    """One-sided Chamfer distance from ``P_src`` to ``Q_tgt``."""
    return float(nearest(P_src, Q_tgt)[1].mean())


def uhd(P_src, Q_tgt) -> float:
    """One-sided Hausdorff distance (squared) from ``P_src`` to ``Q_tgt``."""
    return float(nearest(P_src, Q_tgt)[1].max())


@dataclass
class Assignment:
    perm: np.ndarray  # perm[i] is the index in Q matched to P[i]
    cost: float  # mean matched distance

    @property
    def total(self) -> float:
        return self.cost * len(self.perm)


def emd_cost_matrix(P, Q) -> np.ndarray:
    P, Q = as_points(P), as_points(Q)
    if len(P) != len(Q):
        raise ValueError(f"EMD needs equal-size clouds, got {len(P)} and {len(Q)}")
    _check_nonempty(P, Q)
    return np.sqrt(pairwise_sq_dists(P, Q))


def emd_exact(P, Q) -> Assignment:
    C = emd_cost_matrix(P, Q)
    if len(C) > EXACT_EMD_MAX_POINTS:
        raise ValueError(f"exact EMD is limited to {EXACT_EMD_MAX_POINTS} points, got {len(C)}; "
                         "use emd_approx")
    perm = hungarian(C)
    return Assignment(perm, assignment_cost(C, perm) / len(C))


def emd_approx(P, Q, epsilon: float = 0.01) -> Assignment:
    """Auction assignment whose cost is within a factor (1 + epsilon) of optimal."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    C = emd_cost_matrix(P, Q)
    perm, _ = auction(C, rel_tol=epsilon)
    return Assignment(perm, assignment_cost(C, perm) / len(C))


def emd(P, Q, mode: str = "exact", epsilon: float = 0.01) -> Assignment:
    if mode == "exact":
        return emd_exact(P, Q)
    if mode == "approx":
        return emd_approx(P, Q, epsilon)
    raise ValueError(f"unknown EMD mode {mode!r}")


# ---------------------------------------------------------------- reports

METRIC_SCALES = {"cd": 1e4, "ucd": 1e4, "uhd": 1e2, "emd": 1e2}


@dataclass
class MetricReport:
    """Per-category metric values; ``to_csv`` writes category means with an
    Average row (unweighted mean over categories), scaled by METRIC_SCALES."""

    metrics: tuple[str, ...]
    values: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def add(self, category: str, **vals: float):
        row = self.values.setdefault(category, {m: [] for m in self.metrics})
        for m, v in vals.items():
            row[m].append(float(v))

    def category_means(self) -> dict[str, dict[str, float]]:
        return {cat: {m: float(np.mean(v)) if v else float("nan") for m, v in row.items()}
                for cat, row in sorted(self.values.items())}

    def average(self) -> dict[str, float]:
        means = self.category_means()
        return {m: float(np.mean([row[m] for row in means.values()])) for m in self.metrics}

    def rows(self, scaled: bool = True) -> list[dict]:
        out = []
        means = self.category_means()
        items = list(means.items()) + [("Average", self.average())]
        for cat, row in items:
            r = {"category": cat}
            for m in self.metrics:
                r[m] = row[m] * (METRIC_SCALES[m] if scaled else 1.0)
            out.append(r)
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["category", *self.metrics], lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (v if k == "category" else repr(v)) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate_pair(metrics, pred=None, gt=None, source=None, emd_mode: str = "exact") -> dict[str, float]:
    """Compute the requested metrics for one cloud.

    ``cd``/``emd`` compare prediction with ground truth; ``ucd``/``uhd`` run
    from ``source`` (the partial input when given, else the ground truth)
    to the prediction.
    """
    out = {}
    src = source if source is not None else gt
    for m in metrics:
        if m == "cd":
            out[m] = chamfer(pred, gt)
        elif m == "emd":
            P, G = as_points(pred), as_points(gt)
            mode = emd_mode if len(P) <= EXACT_EMD_MAX_POINTS else "approx"
            out[m] = emd(P, G, mode).cost
        elif m == "ucd":
            out[m] = ucd(src, pred)
        elif m == "uhd":
            out[m] = uhd(src, pred)
        else:
            raise ValueError(f"unknown metric {m!r}; expected one of {sorted(METRIC_SCALES)}")
    return out

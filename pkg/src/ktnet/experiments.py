"""Toy ablation experiment: per-category training runs on the synthetic dataset."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import CATEGORIES, DatasetSplit, build_dataset
from .trainer import TrainConfig, feature_alignment, fit, identity_baseline

VARIANTS = {"full": (), "no_kra": ("no_kra",), "no_kda": ("no_kda",)}


@dataclass
class RunSummary:
    category: str
    variant: str
    initial_cd: float
    final_cd: float
    identity_cd: float
    d_enhanced: float
    d_raw: float
    seconds: float
    out_dir: Path


def toy_dataset(seed: int = 0, count: int = 30, n_points: int = 256, keep_fraction: float = 0.5) -> DatasetSplit:
    return build_dataset(CATEGORIES, count, seed=seed, n_points=n_points, keep_fraction=keep_fraction)


def run_variant(dataset: DatasetSplit, category: str, variant: str, out_dir,
                config: TrainConfig = TrainConfig()) -> RunSummary:
    sub = dataset.for_category(category)
    cfg = config.replace(ablation=frozenset(VARIANTS[variant]))
    t0 = time.perf_counter()
    res = fit(sub, cfg, out_dir)
    seconds = time.perf_counter() - t0
    ident = identity_baseline(sub.paired_test, cfg.n_out).average()["cd"]
    d_enh, d_raw = feature_alignment(res.model, sub.paired_test)
    return RunSummary(category, variant, res.initial_cd, res.final_cd, ident, d_enh, d_raw, seconds, Path(out_dir))


def run_suite(dataset: DatasetSplit, out_root, variants=tuple(VARIANTS), categories=None,
              config: TrainConfig = TrainConfig(), progress=None) -> list[RunSummary]:
    out_root = Path(out_root)
    runs = []
    for cat in categories or dataset.categories():
        for v in variants:
            s = run_variant(dataset, cat, v, out_root / v / cat, config)
            runs.append(s)
            if progress is not None:
                progress(s)
    return runs


def category_mean(runs: list[RunSummary], variant: str, field: str) -> float:
    """Average of ``field`` over categories, like the ``Average`` row of a report."""
    return float(np.mean([getattr(r, field) for r in runs if r.variant == variant]))

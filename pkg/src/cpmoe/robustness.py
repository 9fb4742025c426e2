"""Ablation factories and the corruption robustness grid."""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence, Union

import pandas as pd
from joblib import Parallel, delayed
from sklearn.base import clone

from .data import CorruptionSpec, TrafficDataset
from .estimator import CPMoEClassifier
from .metrics import METRIC_COLUMNS
from .model import VARIANTS

Factory = Callable[[int], CPMoEClassifier]

P_GRID = (20, 40, 60, 80)


def variant_factory(base: Union[CPMoEClassifier, dict, None], variant: str) -> Factory:
    """``seed -> unfitted estimator`` for one ablation variant of ``base``."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if base is None:
        base = CPMoEClassifier()
    elif isinstance(base, dict):
        base = CPMoEClassifier(**base)

    def make(seed: int) -> CPMoEClassifier:
        return clone(base).set_params(variant=variant, seed=seed)

    return make


def ablation_variants(
    base: Union[CPMoEClassifier, dict, None] = None,
    variants: Iterable[str] = VARIANTS,
) -> Dict[str, Factory]:
    return {v: variant_factory(base, v) for v in variants}


def _cell(dataset: TrafficDataset, factory: Factory, mode: str, p: float, seed: int) -> dict:
    data = dataset.with_corruption(CorruptionSpec(mode, p, seed)) if p else dataset
    est = factory(seed).fit(data)
    report = est.score_report(data, "test")
    return {"mode": mode, "p": p, "seed": seed, **report.as_row()}


def robustness_suite(
    dataset: TrafficDataset,
    factory: Factory,
    p_grid: Sequence[float] = P_GRID,
    modes: Sequence[str] = ("mask", "flip"),
    seeds: Sequence[int] = (0, 1, 2),
    n_jobs: Optional[int] = 1,
) -> pd.DataFrame:
    """Train on a corrupted training split for every ``(mode, p, seed)`` cell and
    score on the clean test split.

    The seed drives both the corruption draw and model training. A ``p`` of 0
    trains on clean data (once per seed and mode).
    """
    if not len(p_grid) or not len(modes) or not len(seeds):
        raise ValueError("p_grid, modes and seeds must be nonempty")
    for m in modes:
        CorruptionSpec(m, 0)  # validates the mode
    cells = [(m, p, s) for m in modes for p in p_grid for s in seeds]
    rows = Parallel(n_jobs=n_jobs)(delayed(_cell)(dataset, factory, m, p, s) for m, p, s in cells)
    return pd.DataFrame(rows, columns=["mode", "p", "seed", *METRIC_COLUMNS])


def summarize(table: pd.DataFrame, metric: str = "c_f1") -> pd.DataFrame:
    """Median of ``metric`` over seeds for each ``(mode, p)``."""
    return table.groupby(["mode", "p"], as_index=False)[metric].median()

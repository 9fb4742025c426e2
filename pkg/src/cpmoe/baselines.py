"""Rule-based baselines: persistence (CurrentTime) and per-slot mode (HistoricalAverage)."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import LEVEL, N_CLASSES, TrafficDataset
from .validation import check_dataset, check_origins


def baseline_current_time(recent_levels: np.ndarray, t_f: int) -> np.ndarray:
    """Repeat the last observed level ``[..., T_p, N] -> [..., T_f, N]``."""
    last = np.asarray(recent_levels)[..., -1:, :]
    return np.repeat(np.rint(last).astype(np.int64), t_f, axis=-2)


def slot_mode_table(levels: np.ndarray, slots: np.ndarray, steps_per_day: int) -> np.ndarray:
    """Most frequent level per (time-of-day slot, link); ties go to the higher level,
    slots never seen default to 0.

    ``levels`` is ``[T, N]`` with -1 for unobserved entries, ``slots`` is ``[T]``.
    """
    T, N = levels.shape
    counts = np.zeros((steps_per_day, N, N_CLASSES), dtype=np.int64)
    obs = levels >= 0
    t_idx, l_idx = np.nonzero(obs)
    np.add.at(counts, (slots[t_idx], l_idx, levels[t_idx, l_idx]), 1)
    # argmax on the reversed class axis returns the highest level among ties
    mode = N_CLASSES - 1 - np.argmax(counts[..., ::-1], axis=-1)
    return np.where(counts.sum(-1) > 0, mode, 0).astype(np.int64)


def baseline_historical_average(table: np.ndarray, future_slots: np.ndarray) -> np.ndarray:
    """Look up ``table[slot, link]`` for ``future_slots`` of shape ``[..., T_f]``;
    returns ``[..., T_f, N]``."""
    return table[np.asarray(future_slots)]


class CurrentTimeBaseline(ClassifierMixin, BaseEstimator):
    """Predict the congestion level at the origin for the whole horizon."""

    def fit(self, X: TrafficDataset, y=None):
        check_dataset(X)
        self.t_f_ = X.t_f
        self.n_links_ = X.n_links
        return self

    def predict(self, X: TrafficDataset, origins: Optional[Sequence[int]] = None, split: str = "test"):
        check_is_fitted(self, "t_f_")
        check_dataset(X)
        origins = check_origins(X, origins, split)
        batch = X.batch(origins, split)
        return baseline_current_time(batch["recent"][..., LEVEL], X.t_f)


class HistoricalAverageBaseline(ClassifierMixin, BaseEstimator):
    """Predict the most frequent training-period level for each (link, time-of-day slot)."""

    def fit(self, X: TrafficDataset, y=None):
        check_dataset(X)
        lo, hi = X.train_period()
        levels = X.features.levels[lo:hi]
        self.table_ = slot_mode_table(levels, X.features.time_of_day(np.arange(lo, hi)), X.steps_per_day)
        self.t_f_ = X.t_f
        return self

    def predict(self, X: TrafficDataset, origins: Optional[Sequence[int]] = None, split: str = "test"):
        check_is_fitted(self, "table_")
        check_dataset(X)
        origins = check_origins(X, origins, split)
        future = origins[:, None] + np.arange(1, X.t_f + 1)[None]
        return baseline_historical_average(self.table_, X.features.time_of_day(future))

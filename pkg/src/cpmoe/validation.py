"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data import InsufficientHistory, TrafficDataset


def check_dataset(X) -> TrafficDataset:
    if not isinstance(X, TrafficDataset):
        raise TypeError(f"expected a TrafficDataset, got {type(X).__name__}")
    return X


def check_origins(X: TrafficDataset, origins: Optional[Sequence[int]], split: str = "test") -> np.ndarray:
    """Resolve ``origins`` (default: every origin of ``split``) and make sure each
    one has a full recent window, history and label horizon."""
    if origins is None:
        out = X.split_origins(split)
    else:
        out = np.atleast_1d(np.asarray(origins, dtype=np.int64))
    if out.size == 0:
        raise ValueError(f"no origins to evaluate for split {split!r}")
    lo, hi = int(X.origins[0]), int(X.origins[-1])
    bad = out[(out < lo) | (out > hi)]
    if bad.size:
        raise InsufficientHistory(
            f"origin {int(bad[0])} is outside the valid range [{lo}, {hi}] "
            f"(needs history and a {X.t_f}-step horizon)"
        )
    return out


def check_split(name: str) -> str:
    if name not in ("train", "val", "test", "all"):
        raise ValueError(f"unknown split {name!r}")
    return name

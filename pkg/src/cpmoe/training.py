"""Mini-batch training with validation-based early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .data import TrafficDataset
from .losses import DEFAULT_PHI_STEPS, ordinal_targets, total_loss
from .metrics import evaluate
from .nncore import make_optimizer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "loss", "l_ord", "l_imp", "l_load", "val_cf1")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-7
    patience: int = 30
    batch_size: int = 8
    max_epochs: int = 100
    steps_per_epoch: Optional[int] = None  # None: one pass over the training origins
    seed: int = 0
    lambda_imp: float = 1e-3
    lambda_load: float = 1e-3
    phi_steps: Optional[Sequence[float]] = DEFAULT_PHI_STEPS  # None: one-hot targets
    threads: Optional[int] = None

    def validate(self) -> None:
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.lambda_imp < 0 or self.lambda_load < 0:
            raise ValueError("balancing weights must be non-negative")


@dataclass
class Normalizer:
    """Per-channel standardization fitted on the training period."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, dataset: TrafficDataset) -> "Normalizer":
        lo, hi = dataset.train_period()
        X = dataset.inputs("train")[lo:hi].reshape(-1, dataset.features.values.shape[-1])
        std = X.std(0)
        return cls(X.mean(0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def batch_tensors(batch: Dict[str, np.ndarray], norm: Normalizer, dtype=torch.float32) -> Dict[str, torch.Tensor]:
    """Normalize the feature windows and convert a batch dict to tensors."""
    out = {}
    for key in ("recent", "history"):
        out[key] = torch.from_numpy(norm(batch[key])).to(dtype)
    for key in ("tod", "dow", "history_tod", "history_dow", "labels", "origin"):
        out[key] = torch.from_numpy(np.asarray(batch[key], dtype=np.int64))
    out["label_mask"] = torch.from_numpy(np.asarray(batch["label_mask"], dtype=bool))
    return out


@dataclass
class TrainResult:
    best_state: Dict[str, torch.Tensor]
    best_epoch: int
    best_val_cf1: float
    epochs_run: int
    log: List[dict] = field(default_factory=list)

    def losses(self) -> List[float]:
        return [row["loss"] for row in self.log]

    def write_log(self, path: Union[str, Path]) -> None:
        write_training_log(path, self.log)


def write_training_log(path: Union[str, Path], rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in LOG_COLUMNS})


@torch.no_grad()
def predict_logits(model, dataset: TrafficDataset, origins, split, graph, norm, dtype, batch_size=32) -> np.ndarray:
    """Eval-mode logits ``[B, T_f, N, 3]`` for ``origins``."""
    was_training = model.training
    model.eval()
    parts = []
    for s in range(0, len(origins), batch_size):
        b = batch_tensors(dataset.batch(origins[s:s + batch_size], split), norm, dtype)
        parts.append(model(b, graph).logits.double().numpy())
    model.train(was_training)
    return np.concatenate(parts)


def validation_cf1(model, dataset, graph, norm, dtype) -> float:
    origins = dataset.val_origins
    if origins.size == 0:
        return 0.0
    logits = predict_logits(model, dataset, origins, "val", graph, norm, dtype)
    levels, mask = dataset.labels()
    idx = origins[:, None] + np.arange(1, dataset.t_f + 1)[None]
    return evaluate(levels[idx], logits, mask[idx]).c_f1


def train(
    model: torch.nn.Module,
    dataset: TrafficDataset,
    graph,
    cfg: TrainConfig,
    norm: Optional[Normalizer] = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Fit ``model`` on the training split, selecting the epoch with the best
    validation C-F1 and stopping after ``cfg.patience`` epochs without improvement.

    Runs are reproducible for a fixed seed when torch uses a single thread.
    """
    cfg.validate()
    if dataset.train_origins.size == 0:
        raise ValueError("the training split is empty")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    norm = norm or Normalizer.fit(dataset)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    targets = torch.from_numpy(ordinal_targets(cfg.phi_steps)).to(dtype)
    k = model.cfg.magl.top_k
    opt = make_optimizer(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    origins = dataset.train_origins
    rows: List[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_cf1, best_epoch, stale, step = -math.inf, 0, 0, 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(origins)
        n_batches = math.ceil(len(order) / cfg.batch_size)
        if cfg.steps_per_epoch is not None:
            n_batches = min(n_batches, cfg.steps_per_epoch)
        for bi in range(n_batches):
            b = batch_tensors(dataset.batch(order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size], "train"),
                              norm, dtype)
            out = model(b, graph, generator=gen)
            loss, parts = total_loss(
                out.logits, b["labels"], b["label_mask"], [d.gate for d in out.diagnostics],
                targets, k, cfg.lambda_imp, cfg.lambda_load,
            )
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            rows.append({"epoch": epoch, "step": step, **parts, "val_cf1": None})
        val = validation_cf1(model, dataset, graph, norm, dtype)
        rows[-1]["val_cf1"] = val
        log.info("epoch %d loss %.4f val C-F1 %.4f", epoch, rows[-1]["loss"], val)
        if val > best_cf1:
            best_cf1, best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return TrainResult(best_state, best_epoch, best_cf1, epoch, rows)

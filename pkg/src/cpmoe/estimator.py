"""Estimator wrapper around :class:`~cpmoe.model.CPMoE`."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import TrafficDataset
from .losses import DEFAULT_PHI_STEPS
from .magl import MAGLConfig
from .metrics import MetricReport, evaluate
from .model import VARIANTS, CPMoE, ModelConfig, ModelOutput, graph_tensors, variant_config
from .nncore import CheckpointError, load_checkpoint, save_checkpoint
from .training import Normalizer, TrainConfig, TrainResult, batch_tensors, predict_logits, train
from .validation import check_dataset, check_origins

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CPMoEClassifier(ClassifierMixin, BaseEstimator):
    """Congestion-level classifier over a road network.

    ``fit`` takes a :class:`~cpmoe.data.TrafficDataset` and trains on its
    training split with early stopping on the validation split. ``predict``
    returns hard levels ``[B, T_f, N]`` for the requested origins.

    Parameters
    ----------
    d_hidden, n_layers, n_up, n_down, n_global, top_k, tcn_layers, khop, d_embed, dropout
        Graph-learner architecture.
    wavelet_levels, msa_heads, confidence_hidden
        Trend/periodic expert settings.
    variant : str
        One of ``full``, ``WoLE``, ``WoPL``, ``WoIB``, ``WoC``, ``WA``, ``WoR``.
    phi_steps : tuple of float
        Distances between adjacent classes for label smoothing.
    lr, weight_decay, batch_size, max_epochs, patience, steps_per_epoch, lambda_imp, lambda_load
        Optimization settings.
    seed : int
        Seeds initialization, shuffling, gate noise and dropout.
    dtype : {"float32", "float64"}
    threads : int or None
        Caps torch intra-op threads; 1 gives bitwise reproducible runs.
    """

    def __init__(
        self,
        d_hidden: int = 32,
        n_layers: int = 2,
        n_up: int = 4,
        n_down: int = 4,
        n_global: int = 2,
        top_k: int = 6,
        tcn_layers: int = 2,
        khop: int = 5,
        d_embed: int = 10,
        dropout: float = 0.15,
        wavelet_levels: int = 2,
        msa_heads: int = 2,
        confidence_hidden: int = 8,
        variant: str = "full",
        phi_steps: Sequence[float] = DEFAULT_PHI_STEPS,
        lr: float = 1e-3,
        weight_decay: float = 5e-7,
        batch_size: int = 8,
        max_epochs: int = 100,
        patience: int = 30,
        steps_per_epoch: Optional[int] = None,
        lambda_imp: float = 1e-3,
        lambda_load: float = 1e-3,
        seed: int = 0,
        dtype: str = "float32",
        threads: Optional[int] = None,
    ):
        self.d_hidden = d_hidden
        self.n_layers = n_layers
        self.n_up = n_up
        self.n_down = n_down
        self.n_global = n_global
        self.top_k = top_k
        self.tcn_layers = tcn_layers
        self.khop = khop
        self.d_embed = d_embed
        self.dropout = dropout
        self.wavelet_levels = wavelet_levels
        self.msa_heads = msa_heads
        self.confidence_hidden = confidence_hidden
        self.variant = variant
        self.phi_steps = phi_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.steps_per_epoch = steps_per_epoch
        self.lambda_imp = lambda_imp
        self.lambda_load = lambda_load
        self.seed = seed
        self.dtype = dtype
        self.threads = threads

    # -- configuration ------------------------------------------------------

    def _check_params(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    def model_config(self, dataset: TrafficDataset) -> ModelConfig:
        magl = MAGLConfig(
            d_hidden=self.d_hidden, n_layers=self.n_layers, n_up=self.n_up, n_down=self.n_down,
            n_global=self.n_global, top_k=self.top_k, tcn_layers=self.tcn_layers, khop=self.khop,
            d_embed=self.d_embed, t_p=dataset.t_p, t_f=dataset.t_f,
            n_channels=dataset.features.values.shape[-1], n_static=dataset.network.n_static,
            dropout=self.dropout,
        )
        cfg = ModelConfig(
            magl=magl, history_length=dataset.history_length, steps_per_day=dataset.steps_per_day,
            wavelet_levels=self.wavelet_levels, msa_heads=self.msa_heads,
            confidence_hidden=self.confidence_hidden,
        )
        return variant_config(cfg, self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, patience=self.patience,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            steps_per_epoch=self.steps_per_epoch, seed=self.seed, lambda_imp=self.lambda_imp,
            lambda_load=self.lambda_load,
            phi_steps=None if self.variant == "WoR" else tuple(self.phi_steps), threads=self.threads,
        )

    # -- fitting ------------------------------------------------------------

    def _build(self, dataset: TrafficDataset, normalizer: Normalizer, static_mean, static_std) -> None:
        self._check_params()
        if self.threads:
            torch.set_num_threads(self.threads)
        self.dtype_ = _DTYPES[self.dtype]
        self.config_ = self.model_config(dataset)
        torch.manual_seed(self.seed)
        self.model_ = CPMoE(self.config_, dataset.n_links).to(self.dtype_)
        self.normalizer_ = normalizer
        self.static_mean_, self.static_std_ = static_mean, static_std
        self.graph_ = graph_tensors(dataset.network, self.config_.magl.khop, static_mean, static_std, self.dtype_)
        self.n_links_ = dataset.n_links
        self.t_f_ = dataset.t_f
        self.classes_ = np.arange(3)

    def initialize(self, dataset: TrafficDataset) -> "CPMoEClassifier":
        """Build a freshly initialized (untrained) model for ``dataset``."""
        check_dataset(dataset)
        S = dataset.network.static_attrs()
        self._build(dataset, Normalizer.fit(dataset), S.mean(0), S.std(0))
        return self

    def fit(self, X: TrafficDataset, y=None) -> "CPMoEClassifier":
        self.initialize(X)
        self.result_: TrainResult = train(self.model_, X, self.graph_, self.train_config(),
                                          self.normalizer_, self.dtype_)
        self.model_.eval()
        return self

    # -- inference ----------------------------------------------------------

    def _tensors(self, X: TrafficDataset, origins, split: str):
        check_is_fitted(self, "model_")
        check_dataset(X)
        if X.n_links != self.n_links_:
            raise ValueError(f"model was fitted on {self.n_links_} links, dataset has {X.n_links}")
        return check_origins(X, origins, split)

    def predict_logits(self, X: TrafficDataset, origins=None, split: str = "test") -> np.ndarray:
        origins = self._tensors(X, origins, split)
        return predict_logits(self.model_, X, origins, split, self.graph_, self.normalizer_, self.dtype_)

    def predict_proba(self, X: TrafficDataset, origins=None, split: str = "test") -> np.ndarray:
        z = self.predict_logits(X, origins, split)
        z = np.exp(z - z.max(-1, keepdims=True))
        return z / z.sum(-1, keepdims=True)

    def predict(self, X: TrafficDataset, origins=None, split: str = "test") -> np.ndarray:
        return self.predict_logits(X, origins, split).argmax(-1)

    @torch.no_grad()
    def forward_details(self, X: TrafficDataset, origins=None, split: str = "test") -> ModelOutput:
        """Eval-mode forward pass keeping the per-expert logits and cascade weights."""
        origins = self._tensors(X, origins, split)
        self.model_.eval()
        b = batch_tensors(X.batch(origins, split), self.normalizer_, self.dtype_)
        return self.model_(b, self.graph_)

    def score_report(self, X: TrafficDataset, split: str = "test") -> MetricReport:
        origins = self._tensors(X, None, split)
        pred = self.predict(X, origins, split)
        return evaluate_on(X, origins, pred)

    def score(self, X: TrafficDataset, y=None, split: str = "test") -> float:
        """Congested-class F1 on ``split``."""
        return self.score_report(X, split).c_f1

    # -- persistence --------------------------------------------------------

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> None:
        check_is_fitted(self, "model_")
        meta = {
            "kind": "cpmoe",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "normalizer": {"mean": self.normalizer_.mean.tolist(), "std": self.normalizer_.std.tolist()},
            "static": {"mean": np.asarray(self.static_mean_).tolist(), "std": np.asarray(self.static_std_).tolist()},
            "n_links": self.n_links_,
        }
        if extra:
            meta.update(extra)
        save_checkpoint(path, self.model_.state_dict(), meta)

    @classmethod
    def load(cls, path: Union[str, Path], dataset: TrafficDataset) -> "CPMoEClassifier":
        """Restore a saved model; ``dataset`` supplies the network and window sizes."""
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "cpmoe":
            raise CheckpointError(f"{path} does not hold a CP-MoE model")
        params = dict(meta["params"])
        if params.get("phi_steps") is not None:
            params["phi_steps"] = tuple(params["phi_steps"])
        est = cls(**params)
        if dataset.n_links != meta["n_links"]:
            raise CheckpointError(f"checkpoint expects {meta['n_links']} links, dataset has {dataset.n_links}")
        norm = Normalizer(np.asarray(meta["normalizer"]["mean"]), np.asarray(meta["normalizer"]["std"]))
        est._build(dataset, norm, np.asarray(meta["static"]["mean"]), np.asarray(meta["static"]["std"]))
        expected = est.model_.state_dict()
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        if missing or unexpected:
            raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, t in tensors.items():
            if tuple(t.shape) != tuple(expected[name].shape):
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {tuple(t.shape)} vs model {tuple(expected[name].shape)}"
                )
        est.model_.load_state_dict({k: v.to(expected[k].dtype) for k, v in tensors.items()})
        est.model_.eval()
        est.checkpoint_meta_ = meta
        return est


def evaluate_on(X: TrafficDataset, origins: np.ndarray, pred: np.ndarray) -> MetricReport:
    """Score hard predictions ``[B, T_f, N]`` against the dataset labels."""
    levels, mask = X.labels()
    idx = np.asarray(origins)[:, None] + np.arange(1, X.t_f + 1)[None]
    return evaluate(levels[idx], pred, mask[idx])

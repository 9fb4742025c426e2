"""The full congestion model: MAGL stack, trend and periodic experts, cascade."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .citpe import ConfidenceScore, PeriodicExpert, TrendExpert, cascade, extract_trend
from .data import TrafficNetwork
from .magl import MAGL, EmbeddingBank, GraphTensors, LayerDiagnostics, MAGLConfig

VARIANTS = ("full", "WoLE", "WoPL", "WoIB", "WoC", "WA", "WoR")


@dataclass
class ModelConfig:
    magl: MAGLConfig = field(default_factory=MAGLConfig)
    history_length: int = 84
    steps_per_day: int = 288
    wavelet_levels: int = 2
    msa_heads: int = 2
    confidence_hidden: int = 8
    variant: str = "full"

    @property
    def uses_citpe(self) -> bool:
        return self.variant != "WoC"


def variant_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Apply an ablation toggle to a model configuration."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    magl = replace(
        cfg.magl,
        use_embeddings=variant != "WoLE",
        use_pooling=variant != "WoPL",
        directional=variant != "WoIB",
    )
    return replace(cfg, magl=magl, variant=variant)


def graph_tensors(
    net: TrafficNetwork,
    khop: int,
    static_mean: Optional[np.ndarray] = None,
    static_std: Optional[np.ndarray] = None,
    dtype: torch.dtype = torch.float32,
) -> GraphTensors:
    S = net.static_attrs()
    if static_mean is None:
        static_mean, static_std = S.mean(0), S.std(0)
    S = (S - static_mean) / np.where(static_std > 0, static_std, 1.0)
    return GraphTensors(
        upstream=torch.from_numpy(net.adjacency("upstream")),
        downstream=torch.from_numpy(net.adjacency("downstream")),
        undirected=torch.from_numpy(net.adjacency("undirected")),
        distance=torch.from_numpy(net.distance_matrix()).to(dtype),
        khop=torch.from_numpy(net.k_hop_matrix(khop)).to(dtype),
        static=torch.from_numpy(S).to(dtype),
    )


class ModelOutput(NamedTuple):
    logits: torch.Tensor  # [B, T_f, N, 3]
    p_m: torch.Tensor
    p_tr: Optional[torch.Tensor]
    p_per: Optional[torch.Tensor]
    w_per: torch.Tensor  # [B, T_f, N]
    w_tr: torch.Tensor
    w_m: torch.Tensor
    diagnostics: List[LayerDiagnostics]


class CPMoE(nn.Module):
    """Forward pass over a batch dict of tensors (see :meth:`TrafficDataset.batch`).

    The batch must already be normalized; :class:`~cpmoe.estimator.CPMoEClassifier`
    takes care of that.
    """

    def __init__(self, cfg: ModelConfig, n_links: int):
        super().__init__()
        self.cfg = cfg
        m = cfg.magl
        self.n_links = n_links
        self.embeddings = EmbeddingBank(n_links, m.d_embed, cfg.steps_per_day)
        self.magl = MAGL(m, n_links)
        if cfg.uses_citpe:
            self.trend = TrendExpert(m.n_channels, m.d_hidden, m.t_p, m.t_f, cfg.msa_heads, cfg.wavelet_levels)
            self.periodic = PeriodicExpert(m.n_channels, m.d_hidden, m.d_embed, cfg.history_length, m.t_f)
            self.conf_periodic = ConfidenceScore(cfg.confidence_hidden)
            self.conf_trend = ConfidenceScore(cfg.confidence_hidden)

    def forward(
        self,
        batch: Dict[str, torch.Tensor],
        graph: GraphTensors,
        generator: Optional[torch.Generator] = None,
    ) -> ModelOutput:
        x = batch["recent"]
        p_m, diags = self.magl(x, graph, self.embeddings, batch["tod"], batch["dow"], generator)
        if not self.cfg.uses_citpe:
            one = torch.ones(p_m.shape[:-1], dtype=p_m.dtype)
            return ModelOutput(p_m, p_m, None, None, one * 0, one * 0, one, diags)
        p_tr = self.trend(x, extract_trend(x, self.cfg.wavelet_levels, axis=1))
        p_per = self.periodic(batch["history"], batch["history_tod"], batch["history_dow"], self.embeddings)
        if self.cfg.variant == "WA":
            third = torch.full(p_m.shape[:-1], 1.0 / 3.0, dtype=p_m.dtype)
            return ModelOutput((p_per + p_tr + p_m) / 3.0, p_m, p_tr, p_per, third, third, third, diags)
        out = cascade(p_per, p_tr, p_m, self.conf_periodic(p_per), self.conf_trend(p_tr))
        return ModelOutput(out.logits, p_m, p_tr, p_per, out.w_per, out.w_tr, out.w_m, diags)

"""Mixture of adaptive graph learners.

Each layer encodes the recent hidden states with a gated dilated causal
convolution, builds a per-link gate context, routes every link to its top-K
experts from a pool of upstream, downstream and global graph learners, and
mixes their outputs with the sparse gate weights.

Hidden states use the layout ``[B, T, N, D]`` (batch, time, link, feature).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nncore import MLP, dropout

NEG_FILL = -1e30


@dataclass
class MAGLConfig:
    d_hidden: int = 32
    n_layers: int = 2
    n_up: int = 4
    n_down: int = 4
    n_global: int = 2
    top_k: int = 6
    tcn_layers: int = 2
    khop: int = 5
    d_embed: int = 10
    t_p: int = 12
    t_f: int = 12
    n_channels: int = 2
    n_static: int = 4
    dropout: float = 0.15
    use_embeddings: bool = True  # False for the -WoLE ablation
    use_pooling: bool = True  # False for -WoPL
    directional: bool = True  # False for -WoIB

    @property
    def n_experts(self) -> int:
        return self.n_up + self.n_down + self.n_global

    @property
    def context_dim(self) -> int:
        d = self.d_hidden  # static-attribute encoding
        if self.use_pooling:
            d += self.d_hidden
        if self.use_embeddings:
            d += 3 * self.d_embed
        return d

    def validate(self) -> None:
        for name in ("d_hidden", "n_layers", "tcn_layers", "d_embed", "t_p", "t_f", "top_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds the {self.n_experts} experts")
        if self.khop < 0:
            raise ValueError("khop must be non-negative")


class GraphTensors(NamedTuple):
    """Static graph structure as tensors. Masks are ``[N, N]`` with
    ``mask[i, j]`` true when j is a neighbor of i."""

    upstream: torch.Tensor
    downstream: torch.Tensor
    undirected: torch.Tensor
    distance: torch.Tensor
    khop: torch.Tensor
    static: torch.Tensor  # [N, D_s], standardized


def dilated_causal_conv(x: torch.Tensor, theta: torch.Tensor, dilation: int) -> torch.Tensor:
    """``y(t) = sum_s x(t - dilation*s) @ theta[s]`` with zero left padding.

    ``x`` is ``[..., T, D_in]``, ``theta`` is ``[S, D_in, D_out]``.
    """
    T = x.shape[-2]
    out = x @ theta[0]
    for s in range(1, theta.shape[0]):
        shift = dilation * s
        if shift >= T:
            break
        shifted = F.pad(x[..., : T - shift, :], (0, 0, shift, 0))
        out = out + shifted @ theta[s]
    return out


class GatedTCN(nn.Module):
    """Stacked ``tanh(x *_d Θ1 + b) ⊙ sigmoid(x *_d Θ2 + c)`` with dilation ``2**layer``."""

    def __init__(self, d: int, n_layers: int = 2, kernel_size: int = 2):
        super().__init__()
        bound = 1.0 / (kernel_size * d) ** 0.5
        self.filter = nn.ParameterList(
            nn.Parameter(torch.empty(kernel_size, d, d).uniform_(-bound, bound)) for _ in range(n_layers)
        )
        self.gate = nn.ParameterList(
            nn.Parameter(torch.empty(kernel_size, d, d).uniform_(-bound, bound)) for _ in range(n_layers)
        )
        self.filter_bias = nn.ParameterList(nn.Parameter(torch.zeros(d)) for _ in range(n_layers))
        self.gate_bias = nn.ParameterList(nn.Parameter(torch.zeros(d)) for _ in range(n_layers))

    @property
    def receptive_field(self) -> int:
        k = self.filter[0].shape[0]
        return 1 + sum((k - 1) * 2 ** l for l in range(len(self.filter)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """``h`` is ``[..., T, D]`` with time on the second-to-last axis."""
        for l in range(len(self.filter)):
            d = 2 ** l
            f = dilated_causal_conv(h, self.filter[l], d) + self.filter_bias[l]
            g = dilated_causal_conv(h, self.gate[l], d) + self.gate_bias[l]
            h = torch.tanh(f) * torch.sigmoid(g)
        return h


class GateOutput(NamedTuple):
    weights: torch.Tensor  # [..., N_e], exactly K nonzeros per row
    topk: torch.Tensor  # [..., K] expert indices
    clean_logits: torch.Tensor
    noisy_logits: torch.Tensor
    noise_std: torch.Tensor


class NoisyTopKGate(nn.Module):
    def __init__(self, context_dim: int, n_experts: int, top_k: int, hidden: int = 32):
        super().__init__()
        if top_k > n_experts:
            raise ValueError("top_k cannot exceed the number of experts")
        self.n_experts = n_experts
        self.top_k = top_k
        self.logits = MLP([context_dim, hidden, n_experts])
        self.noise = MLP([context_dim, hidden, n_experts])

    def forward(
        self,
        c: torch.Tensor,
        training: Optional[bool] = None,
        generator: Optional[torch.Generator] = None,
    ) -> GateOutput:
        training = self.training if training is None else training
        clean = self.logits(c)
        std = F.softplus(self.noise(c))
        if training:
            eps = torch.randn(clean.shape, generator=generator, dtype=clean.dtype, device=clean.device)
            noisy = clean + eps * std
        else:
            noisy = clean
        return topk_softmax(noisy, self.top_k, clean, std)


def topk_softmax(noisy: torch.Tensor, k: int, clean=None, std=None) -> GateOutput:
    """Softmax over the ``k`` largest logits, zeros elsewhere; ties go to lower index."""
    order = torch.sort(noisy, dim=-1, descending=True, stable=True).indices
    top = order[..., :k]
    w = torch.softmax(noisy.gather(-1, top), dim=-1)
    weights = torch.zeros_like(noisy).scatter(-1, top, w)
    clean = noisy if clean is None else clean
    std = torch.zeros_like(noisy) if std is None else std
    return GateOutput(weights, top, clean, noisy, std)


class GraphAttentionExperts(nn.Module):
    """``n`` edge-aware graph attention experts evaluated together.

    ``E(H)_i = sum_{j in N(i)} alpha_ij W_v H_j + H_i`` where
    ``alpha_i = softmax_j LeakyReLU(a^T [W H_i || W H_j || W_r r_ij])``.
    Links without neighbors keep ``H_i``.
    """

    def __init__(self, n: int, d: int):
        super().__init__()
        bound = 1.0 / d ** 0.5
        self.W = nn.Parameter(torch.empty(n, d, d).uniform_(-bound, bound))
        self.W_v = nn.Parameter(torch.empty(n, d, d).uniform_(-bound, bound))
        self.W_r = nn.Parameter(torch.empty(n, d).uniform_(-1.0, 1.0))
        self.a = nn.Parameter(torch.empty(n, 3 * d).uniform_(-(3 * d) ** -0.5, (3 * d) ** -0.5))
        self.last_attention: Optional[torch.Tensor] = None

    def scores(self, h: torch.Tensor, distance: torch.Tensor) -> torch.Tensor:
        """Raw attention scores ``[B, n, T, N, N]`` before LeakyReLU and masking."""
        d = h.shape[-1]
        wh = torch.einsum("btnd,edk->betnk", h, self.W)
        a_i, a_j, a_r = self.a[:, :d], self.a[:, d:2 * d], self.a[:, 2 * d:]
        s_i = torch.einsum("betnk,ek->betn", wh, a_i)
        s_j = torch.einsum("betnk,ek->betn", wh, a_j)
        s_r = (self.W_r * a_r).sum(-1)[:, None, None] * distance[None]  # [n, N, N]
        return s_i[..., :, None] + s_j[..., None, :] + s_r[None, :, None]

    def forward(self, h: torch.Tensor, neighbors: torch.Tensor, distance: torch.Tensor) -> torch.Tensor:
        """``h`` is ``[B, T, N, D]``; returns ``[B, n, T, N, D]``."""
        score = F.leaky_relu(self.scores(h, distance), 0.01)
        score = score.masked_fill(~neighbors, NEG_FILL)
        alpha = torch.softmax(score, dim=-1)
        has_nb = neighbors.any(-1).to(h.dtype)[:, None]  # [N, 1]
        alpha = alpha * has_nb
        self.last_attention = alpha.detach()
        msg = torch.einsum("btnd,edk->betnk", h, self.W_v)
        return alpha @ msg + h[:, None]


def adaptive_adjacency(emb: torch.Tensor) -> torch.Tensor:
    """Row-wise ``softmax(relu(E E^T))`` for ``emb`` of shape ``[..., N, D_l]``."""
    return torch.softmax(F.relu(emb @ emb.transpose(-1, -2)), dim=-1)


class GlobalExperts(nn.Module):
    """Experts aggregating over all links with a learned adjacency each."""

    def __init__(self, n: int, n_links: int, d: int, d_embed: int):
        super().__init__()
        bound = 1.0 / d ** 0.5
        self.E_s = nn.Parameter(torch.randn(n, n_links, d_embed) * 0.1)
        self.W_v = nn.Parameter(torch.empty(n, d, d).uniform_(-bound, bound))

    def adjacency(self) -> torch.Tensor:
        return adaptive_adjacency(self.E_s)

    def forward(self, h: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        alpha = self.adjacency() if alpha is None else alpha  # [n, N, N]
        msg = torch.einsum("btnd,edk->betnk", h, self.W_v)
        return alpha[None, :, None] @ msg + h[:, None]


class EmbeddingBank(nn.Module):
    """Spatial, time-of-day and day-of-week embeddings shared across components."""

    def __init__(self, n_links: int, d_embed: int, steps_per_day: int = 288):
        super().__init__()
        self.E_s = nn.Parameter(torch.randn(n_links, d_embed) * 0.1)
        self.E_tod = nn.Parameter(torch.randn(steps_per_day, d_embed) * 0.1)
        self.E_dow = nn.Parameter(torch.randn(7, d_embed) * 0.1)


def gate_context(
    h_tcn: torch.Tensor,
    khop: torch.Tensor,
    static_code: torch.Tensor,
    emb: Optional[EmbeddingBank],
    tod: Optional[torch.Tensor],
    dow: Optional[torch.Tensor],
    use_pooling: bool = True,
) -> torch.Tensor:
    """``[sum_{j in k-hop(i)} H'_j(last) || MLP_s(S_i) || E_s[i] || E_tod[tod] || E_dow[dow]]``.

    Returns ``[B, N, context_dim]``.
    """
    B, _, N, _ = h_tcn.shape
    parts = []
    if use_pooling:
        parts.append(khop @ h_tcn[:, -1])
    parts.append(static_code.expand(B, N, -1))
    if emb is not None:
        parts.append(emb.E_s.expand(B, N, -1))
        parts.append(emb.E_tod[tod][:, None].expand(B, N, -1))
        parts.append(emb.E_dow[dow][:, None].expand(B, N, -1))
    return torch.cat(parts, dim=-1)


class LayerDiagnostics(NamedTuple):
    gate: GateOutput  # tensors shaped [B, N, N_e]
    expert_outputs: torch.Tensor  # [B, N_e, T, N, D]


class MAGLLayer(nn.Module):
    def __init__(self, cfg: MAGLConfig, n_links: int):
        super().__init__()
        D = cfg.d_hidden
        self.cfg = cfg
        self.tcn = GatedTCN(D, cfg.tcn_layers)
        self.static_encoder = MLP([cfg.n_static, D, D])
        self.gate = NoisyTopKGate(cfg.context_dim, cfg.n_experts, cfg.top_k, hidden=D)
        self.up = GraphAttentionExperts(cfg.n_up, D) if cfg.n_up else None
        self.down = GraphAttentionExperts(cfg.n_down, D) if cfg.n_down else None
        self.glob = GlobalExperts(cfg.n_global, n_links, D, cfg.d_embed) if cfg.n_global else None

    def experts(self, h: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        """All expert outputs ``[B, N_e, T, N, D]`` ordered up, down, global."""
        up_nb = graph.upstream if self.cfg.directional else graph.undirected
        down_nb = graph.downstream if self.cfg.directional else graph.undirected
        outs = []
        if self.up is not None:
            outs.append(self.up(h, up_nb, graph.distance))
        if self.down is not None:
            outs.append(self.down(h, down_nb, graph.distance))
        if self.glob is not None:
            outs.append(self.glob(h))
        return torch.cat(outs, dim=1)

    def forward(
        self,
        h: torch.Tensor,
        graph: GraphTensors,
        emb: Optional[EmbeddingBank],
        tod: torch.Tensor,
        dow: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ):
        h_tcn = self.tcn(h.transpose(1, 2)).transpose(1, 2)
        ctx = gate_context(
            h_tcn,
            graph.khop,
            self.static_encoder(graph.static),
            emb if self.cfg.use_embeddings else None,
            tod,
            dow,
            self.cfg.use_pooling,
        )
        gate = self.gate(ctx, generator=generator)
        expert_out = self.experts(h, graph)
        out = torch.einsum("bne,betnd->btnd", gate.weights, expert_out)
        return out, LayerDiagnostics(gate, expert_out)


class MAGL(nn.Module):
    """Input projection, stacked MAGL layers and the prediction head."""

    def __init__(self, cfg: MAGLConfig, n_links: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.d_hidden
        self.input = nn.Linear(cfg.n_channels, D)
        self.layers = nn.ModuleList(MAGLLayer(cfg, n_links) for _ in range(cfg.n_layers))
        self.head = MLP([cfg.t_p * D, 4 * D, cfg.t_f * 3], dropout=cfg.dropout)

    def encode(
        self,
        x: torch.Tensor,
        graph: GraphTensors,
        emb: Optional[EmbeddingBank],
        tod: torch.Tensor,
        dow: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ):
        h = dropout(self.input(x), self.cfg.dropout, self.training, generator)
        diags: List[LayerDiagnostics] = []
        for layer in self.layers:
            h, diag = layer(h, graph, emb, tod, dow, generator)
            h = dropout(h, self.cfg.dropout, self.training, generator)
            diags.append(diag)
        return h, diags

    def predict_head(self, h: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """``[B, T_p, N, D] -> [B, T_f, N, 3]`` logits."""
        B, T, N, D = h.shape
        flat = h.permute(0, 2, 1, 3).reshape(B, N, T * D)
        return self.head(flat, generator).reshape(B, N, self.cfg.t_f, 3).permute(0, 2, 1, 3)

    def forward(self, x, graph, emb, tod, dow, generator=None):
        h, diags = self.encode(x, graph, emb, tod, dow, generator)
        return self.predict_head(h, generator), diags

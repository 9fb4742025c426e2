"""Trend and periodic experts and the confidence-weighted cascade.

The wavelet helpers work on numpy arrays and torch tensors alike and always
transform along the last axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from .nncore import MLP, MultiHeadSelfAttention

SQRT2 = math.sqrt(2.0)


@dataclass
class WaveletCoeffs:
    approx: object
    details: List[object] = field(default_factory=list)  # finest level first
    padded: List[bool] = field(default_factory=list)  # one flag per level

    @property
    def levels(self) -> int:
        return len(self.details)


def _cat(parts, like):
    if isinstance(like, torch.Tensor):
        return torch.cat(parts, dim=-1)
    return np.concatenate(parts, axis=-1)


def dwt(x):
    """Single-level Haar transform of an even-length signal: ``(approx, detail)``."""
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cannot transform an empty signal")
    if n % 2:
        raise ValueError(f"dwt needs an even length, got {n}")
    even, odd = x[..., 0::2], x[..., 1::2]
    return (even + odd) / SQRT2, (even - odd) / SQRT2


def idwt(approx, detail):
    """Inverse of :func:`dwt`."""
    if approx.shape != detail.shape:
        raise ValueError(f"coefficient shapes differ: {tuple(approx.shape)} vs {tuple(detail.shape)}")
    even = (approx + detail) / SQRT2
    odd = (approx - detail) / SQRT2
    if isinstance(approx, torch.Tensor):
        return torch.stack([even, odd], dim=-1).reshape(*approx.shape[:-1], 2 * approx.shape[-1])
    return np.stack([even, odd], axis=-1).reshape(*approx.shape[:-1], 2 * approx.shape[-1])


def wavedec(x, levels: int) -> WaveletCoeffs:
    """Multi-level Haar decomposition.

    An odd-length approximation is padded by repeating its last sample before
    splitting; the pad is dropped again by :func:`waverec`.
    """
    out = WaveletCoeffs(approx=x)
    a = x
    for _ in range(levels):
        pad = a.shape[-1] % 2 == 1
        if pad:
            a = _cat([a, a[..., -1:]], a)
        a, d = dwt(a)
        out.details.append(d)
        out.padded.append(pad)
    out.approx = a
    return out


def waverec(coeffs: WaveletCoeffs):
    a = coeffs.approx
    for d, pad in zip(reversed(coeffs.details), reversed(coeffs.padded)):
        a = idwt(a, d)
        if pad:
            a = a[..., :-1]
    return a


def extract_trend(x, levels: int = 2, axis: int = -1):
    """Low-frequency reconstruction: decompose, zero every detail band, invert."""
    moved = x.movedim(axis, -1) if isinstance(x, torch.Tensor) else np.moveaxis(x, axis, -1)
    coeffs = wavedec(moved, levels)
    zero = torch.zeros_like if isinstance(x, torch.Tensor) else np.zeros_like
    coeffs.details = [zero(d) for d in coeffs.details]
    rec = waverec(coeffs)
    return rec.movedim(-1, axis) if isinstance(x, torch.Tensor) else np.moveaxis(rec, -1, axis)


class TrendExpert(nn.Module):
    """Per-link self-attention over the trend window followed by an MLP head."""

    def __init__(self, n_channels: int, d: int, t_p: int, t_f: int, heads: int = 2, levels: int = 2):
        super().__init__()
        self.levels = levels
        self.t_f = t_f
        self.embed = nn.Linear(n_channels, d)
        self.msa = MultiHeadSelfAttention(d, heads)
        self.head = MLP([t_p * d, d, t_f * 3])

    def forward(self, x: torch.Tensor, trend: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``x`` is the recent window ``[B, T_p, N, C]``; returns ``[B, T_f, N, 3]``."""
        R = extract_trend(x, self.levels, axis=1) if trend is None else trend
        B, T, N, _ = R.shape
        z = self.msa(self.embed(R.permute(0, 2, 1, 3)))  # [B, N, T, D]
        return self.head(z.reshape(B, N, -1)).reshape(B, N, self.t_f, 3).permute(0, 2, 1, 3)


class PeriodicExpert(nn.Module):
    """MLP over the concatenated daily/weekly windows enriched with time embeddings."""

    def __init__(self, n_channels: int, d: int, d_embed: int, history_length: int, t_f: int):
        super().__init__()
        self.t_f = t_f
        self.encoder = MLP([history_length * (n_channels + 2 * d_embed), d, d], final_activation="relu")
        self.head = MLP([d + d_embed, d, t_f * 3])

    def forward(self, hist, hist_tod, hist_dow, emb) -> torch.Tensor:
        """``hist`` ``[B, L, N, C]``; ``hist_tod``/``hist_dow`` ``[B, L]``; returns ``[B, T_f, N, 3]``."""
        B, L, N, _ = hist.shape
        t_emb = torch.cat([emb.E_tod[hist_tod], emb.E_dow[hist_dow]], dim=-1)  # [B, L, 2D_l]
        seq = torch.cat([hist, t_emb[:, :, None].expand(B, L, N, -1)], dim=-1)
        hp = self.encoder(seq.permute(0, 2, 1, 3).reshape(B, N, -1))
        z = torch.cat([hp, emb.E_s.expand(B, N, -1)], dim=-1)
        return self.head(z).reshape(B, N, self.t_f, 3).permute(0, 2, 1, 3)


def dispersion(logits: torch.Tensor) -> torch.Tensor:
    """``[population variance of logits, negative entropy of softmax(logits)]``."""
    var = logits.var(dim=-1, unbiased=False)
    logp = torch.log_softmax(logits, dim=-1)
    neg_ent = (logp.exp() * logp).sum(-1)
    return torch.stack([var, neg_ent], dim=-1)


class ConfidenceScore(nn.Module):
    """Maps the dispersion of a logit vector to a weight in (0, 1)."""

    def __init__(self, hidden: int = 8):
        super().__init__()
        self.mlp = MLP([2, hidden, 1], final_activation="sigmoid")

    def forward(self, logits: torch.Tensor) -> torch.Tensor:
        return self.mlp(dispersion(logits)).squeeze(-1)


class CascadeOutput(NamedTuple):
    logits: torch.Tensor
    w_per: torch.Tensor
    w_tr: torch.Tensor
    w_m: torch.Tensor
    c1: torch.Tensor
    c2: torch.Tensor


def cascade(p_per, p_tr, p_m, c1, c2) -> CascadeOutput:
    """Blend trend into MAGL with weight ``c2``, then periodic into that with ``c1``.

    ``c1``/``c2`` hold one weight per logit vector (shape of the logits minus
    the class axis).
    """
    if not (p_per.shape == p_tr.shape == p_m.shape):
        raise ValueError(
            f"logit shapes differ: {tuple(p_per.shape)}, {tuple(p_tr.shape)}, {tuple(p_m.shape)}"
        )
    a1, a2 = c1[..., None], c2[..., None]
    p_re = a2 * p_tr + (1 - a2) * p_m
    p = a1 * p_per + (1 - a1) * p_re
    return CascadeOutput(p, c1, (1 - c1) * c2, (1 - c1) * (1 - c2), c1, c2)

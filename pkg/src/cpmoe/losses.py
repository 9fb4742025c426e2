"""Training objectives: ordinally smoothed KL plus expert-balancing penalties."""

from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import torch

from .magl import GateOutput

N_CLASSES = 3
DEFAULT_PHI_STEPS = (1.0, 2.0)


def phi_matrix(phi_steps: Sequence[float] = DEFAULT_PHI_STEPS) -> np.ndarray:
    """Class distance matrix built by telescoping adjacent-class distances."""
    steps = np.asarray(phi_steps, dtype=np.float64)
    if np.any(steps < 0):
        raise ValueError("class distances must be non-negative")
    pos = np.concatenate([[0.0], np.cumsum(steps)])
    return np.abs(pos[:, None] - pos[None, :])


def ordinal_smooth(y: int, phi_steps: Sequence[float] = DEFAULT_PHI_STEPS) -> np.ndarray:
    """Soft label ``exp(-phi(i, y)) / sum_j exp(-phi(j, y))``."""
    n = len(phi_steps) + 1
    if not 0 <= int(y) < n or int(y) != y:
        raise ValueError(f"invalid class {y!r}")
    logits = -phi_matrix(phi_steps)[:, int(y)]
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def ordinal_targets(phi_steps: Optional[Sequence[float]] = DEFAULT_PHI_STEPS) -> np.ndarray:
    """``[3, 3]`` matrix whose row ``y`` is the target distribution for class ``y``.

    ``phi_steps=None`` gives one-hot targets (no ordinal smoothing).
    """
    if phi_steps is None:
        return np.eye(N_CLASSES)
    return np.stack([ordinal_smooth(y, phi_steps) for y in range(len(phi_steps) + 1)])


def ordinal_kl_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    targets: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean over unmasked entries of ``KL(target(y) || softmax(logits))``.

    ``targets`` is the ``[3, 3]`` table from :func:`ordinal_targets`.
    """
    y = targets.to(logits.dtype)[labels]
    logp = torch.log_softmax(logits, dim=-1)
    # 0 * log 0 contributes nothing
    ylogy = torch.where(y > 0, y * torch.log(torch.where(y > 0, y, torch.ones_like(y))), torch.zeros_like(y))
    kl = (ylogy - y * logp).sum(-1)
    if mask is None:
        return kl.mean()
    mask = mask.to(kl.dtype)
    n = mask.sum()
    if n == 0:
        raise ValueError("no observed label to compute the loss on")
    return (kl * mask).sum() / n


def cv(x: torch.Tensor) -> torch.Tensor:
    """Coefficient of variation (population std / mean); 0 when the mean is 0."""
    mean = x.mean()
    if mean.abs() == 0:
        return torch.zeros((), dtype=x.dtype)
    # clamp keeps the gradient finite at perfect balance
    return x.var(unbiased=False).clamp_min(1e-24).sqrt() / mean


def _flat(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(-1, t.shape[-1])


def importance_loss(gate: GateOutput) -> torch.Tensor:
    """CV over experts of the summed gate weights across the batch."""
    return cv(_flat(gate.weights).sum(0))


def load_probabilities(gate: GateOutput, k: int) -> torch.Tensor:
    """Smooth probability that each expert lands in the top-K under fresh noise.

    ``Pr_j = Phi((clean_j - kth_excluding_j) / std_j)`` where the threshold is
    the K-th largest noisy logit among the other experts.
    """
    clean, noisy, std = _flat(gate.clean_logits), _flat(gate.noisy_logits), _flat(gate.noise_std)
    n_e = clean.shape[-1]
    if k >= n_e:
        return torch.ones_like(clean)
    top = torch.topk(noisy, k + 1, dim=-1).values
    kth = top[:, k - 1:k]  # threshold for experts outside the top-K
    k1th = top[:, k:k + 1]  # threshold for experts inside it
    inside = torch.zeros_like(noisy, dtype=torch.bool).scatter(-1, _flat(gate.topk), True)
    threshold = torch.where(inside, k1th, kth)
    normal = torch.distributions.Normal(torch.zeros((), dtype=clean.dtype), torch.ones((), dtype=clean.dtype))
    diff = clean - threshold
    safe_std = torch.where(std > 0, std, torch.ones_like(std))
    soft = normal.cdf(diff / safe_std)
    hard = (diff > 0).to(clean.dtype)
    return torch.where(std > 0, soft, hard)


def load_loss(gate: GateOutput, k: int) -> torch.Tensor:
    return cv(load_probabilities(gate, k).sum(0))


def total_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    mask: Optional[torch.Tensor],
    gates: Iterable[GateOutput],
    targets: torch.Tensor,
    k: int,
    lambda_imp: float = 1e-3,
    lambda_load: float = 1e-3,
) -> Tuple[torch.Tensor, dict]:
    """``L_ord + lambda_imp * sum_l L_imp + lambda_load * sum_l L_load``.

    Returns the loss and a dict of detached components.
    """
    l_ord = ordinal_kl_loss(logits, labels, targets, mask)
    gates = list(gates)
    zero = torch.zeros((), dtype=logits.dtype)
    l_imp = sum((importance_loss(g) for g in gates), zero)
    l_load = sum((load_loss(g, k) for g in gates), zero)
    loss = l_ord + lambda_imp * l_imp + lambda_load * l_load
    return loss, {"loss": loss.item(), "l_ord": l_ord.item(), "l_imp": l_imp.item(), "l_load": l_load.item()}

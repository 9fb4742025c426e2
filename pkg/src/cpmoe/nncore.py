"""Neural building blocks shared by every model component.

Tensors, autograd and the optimizer come from torch. This module adds the
handful of layers the congestion model needs, a deterministic parameter view,
the finite-difference gradient oracle and the checkpoint container.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ACTIVATIONS",
    "CheckpointError",
    "GradCheckReport",
    "MLP",
    "MultiHeadSelfAttention",
    "affine",
    "dropout",
    "finite_difference_check",
    "load_checkpoint",
    "make_optimizer",
    "parameter_store",
    "save_checkpoint",
    "softmax",
]

CHECKPOINT_MAGIC = b"CPMOECKP"
CHECKPOINT_VERSION = 1

ACTIVATIONS: Dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": F.relu,
    "leaky_relu": lambda x: F.leaky_relu(x, negative_slope=0.01),
    "sigmoid": torch.sigmoid,
    "softplus": F.softplus,
    "tanh": torch.tanh,
    "none": lambda x: x,
}


def _activation(name: Optional[str]) -> Callable[[torch.Tensor], torch.Tensor]:
    key = "none" if name is None else name.lower()
    if key not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}")
    return ACTIVATIONS[key]


def affine(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Apply ``x @ W + b`` over the last axis of ``x``."""
    if W.dim() != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"shape mismatch: x{tuple(x.shape)} W{tuple(W.shape)} b{tuple(b.shape)}"
        )
    return x @ W + b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch subtracts the running max internally
    return torch.softmax(x, dim=axis)


def dropout(
    x: torch.Tensor,
    rate: float,
    training: bool,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class MLP(nn.Module):
    """Stack of affine layers.

    ``layer_dims`` lists every width including input and output, so
    ``[in, hidden, out]`` builds two affine layers. Hidden layers use
    ``activation``; the last layer uses ``final_activation`` (default none,
    which suits logit heads).
    """

    def __init__(
        self,
        layer_dims: Sequence[int],
        activation: Optional[str] = "relu",
        final_activation: Optional[str] = None,
        dropout: float = 0.0,
    ):
        super().__init__()
        if len(layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output width")
        self.layer_dims = list(layer_dims)
        # nn.Linear's default init is uniform(+-1/sqrt(fan_in)) for weight and bias
        self.layers = nn.ModuleList(
            nn.Linear(i, o) for i, o in zip(layer_dims[:-1], layer_dims[1:])
        )
        self.activation = activation
        self.final_activation = final_activation
        self.dropout = dropout

    def forward(
        self,
        x: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ) -> torch.Tensor:
        act = _activation(self.activation)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
                x = dropout(x, self.dropout, self.training, generator)
        return _activation(self.final_activation)(x)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over the second-to-last axis.

    Input ``[..., T, D]``; each head attends with width ``D // heads``; head
    outputs are concatenated and sent through an output projection.
    """

    def __init__(self, d_model: int, heads: int = 2):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.last_attention: Optional[torch.Tensor] = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, T, _ = x.shape
        return x.reshape(*lead, T, self.heads, self.d_model // self.heads).transpose(-3, -2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_model // self.heads)
        attn = torch.softmax(scores, dim=-1)
        self.last_attention = attn.detach()
        ctx = (attn @ v).transpose(-3, -2)
        ctx = ctx.reshape(*ctx.shape[:-2], self.d_model)
        return self.out(ctx)


def parameter_store(module: nn.Module) -> "OrderedDict[str, nn.Parameter]":
    """Named parameters in lexicographic name order."""
    return OrderedDict(sorted(module.named_parameters(), key=lambda kv: kv[0]))


def make_optimizer(
    params: Iterable[nn.Parameter],
    lr: float = 1e-3,
    weight_decay: float = 5e-7,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Optimizer:
    """Adam with decoupled weight decay."""
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_parameter: Dict[str, float] = field(default_factory=dict)
    n_coordinates: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def worst(self) -> Tuple[str, float]:
        if not self.per_parameter:
            return "", 0.0
        name = max(self.per_parameter, key=self.per_parameter.get)
        return name, self.per_parameter[name]


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    params: Union[nn.Module, Mapping[str, torch.Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    coords_per_tensor: int = 32,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of ``f`` with central differences.

    ``f`` is re-evaluated with parameters perturbed in place, so it must be a
    pure function of the parameters (re-seed any noise inside ``f``). At most
    ``coords_per_tensor`` coordinates are sampled from every tensor (all of
    them when the tensor is smaller). The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps gradients far below the
    cancellation error of the differences (about ``eps * |f| / h``) from
    dominating the report.
    """
    named = parameter_store(params) if isinstance(params, nn.Module) else OrderedDict(params)
    tensors = list(named.values())
    for p in tensors:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise FloatingPointError(f"objective is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    with torch.no_grad():
        for (name, p), g in zip(named.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat_p, flat_g = p.view(-1), g.reshape(-1)
            n = flat_p.numel()
            idx = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
            worst = 0.0
            for k in idx:
                k = int(k)
                orig = flat_p[k].item()
                flat_p[k] = orig + h
                up = f().item()
                flat_p[k] = orig - h
                down = f().item()
                flat_p[k] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"objective not finite while perturbing {name}[{k}]")
                numeric = (up - down) / (2 * h)
                analytic = flat_g[k].item()
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, rel)
            report.per_parameter[name] = worst
            report.n_coordinates += len(idx)
            report.max_rel_error = max(report.max_rel_error, worst)
    return report


class CheckpointError(ValueError):
    pass


_DTYPES = {
    torch.float64: "<f8",
    torch.float32: "<f4",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_DTYPE_NAMES = {torch.float64: "float64", torch.float32: "float32", torch.int64: "int64",
                torch.int32: "int32", torch.bool: "bool"}
_NAME_TO_DTYPE = {v: k for k, v in _DTYPE_NAMES.items()}


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, torch.Tensor],
    metadata: Optional[Mapping] = None,
) -> None:
    """Write tensors as ``magic | u64 header length | JSON header | raw bytes``.

    Raw values are little-endian, row-major, laid out in the order of the
    (sorted) header entries.
    """
    entries: List[dict] = []
    blobs: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": _DTYPE_NAMES[t.dtype],
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "tensors": entries, "metadata": dict(metadata or {})},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: Union[str, Path]) -> Tuple["OrderedDict[str, torch.Tensor]", dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('format_version')} != supported {CHECKPOINT_VERSION}"
        )
    body = data[16 + hlen:]
    out: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for e in header["tensors"]:
        dtype = _NAME_TO_DTYPE[e["dtype"]]
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']} in {path}")
        arr = np.frombuffer(chunk, dtype=_DTYPES[dtype]).reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr)
    return out, header.get("metadata", {})

"""Flat ``key = value`` run configuration (TOML syntax, optional section tables)."""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import CorruptionSpec, TrafficDataset
from .estimator import CPMoEClassifier
from .model import VARIANTS


class ConfigError(ValueError):
    """Raised with every problem found in a configuration file."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def read_flat(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse a TOML file into a flat dict. Keys inside ``[section]`` tables are
    lifted to the top level; a key defined twice is an error."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    flat: Dict[str, Any] = {}
    errors = []
    for key, value in doc.items():
        items = value.items() if isinstance(value, dict) else [(key, value)]
        for k, v in items:
            if k in flat:
                errors.append(f"key {k!r} defined more than once")
            flat[k] = v
    if errors:
        raise ConfigError(errors)
    return flat


SECTIONS = {
    "data": ("t_p", "t_f", "n_days", "n_weeks", "split_train", "split_val", "split_test"),
    "model": ("d_hidden", "n_layers", "n_up", "n_down", "n_global", "top_k", "tcn_layers", "khop",
              "d_embed", "dropout", "wavelet_levels", "msa_heads", "confidence_hidden", "phi_steps"),
    "training": ("lr", "weight_decay", "batch_size", "max_epochs", "patience", "steps_per_epoch",
                 "lambda_imp", "lambda_load", "seed", "dtype", "threads"),
    "run": ("variant", "corrupt"),
}


@dataclass
class RunConfig:
    # data
    t_p: int = 12
    t_f: int = 12
    n_days: int = 4
    n_weeks: int = 3
    split_train: float = 0.7
    split_val: float = 0.1
    split_test: float = 0.2
    # model
    d_hidden: int = 32
    n_layers: int = 2
    n_up: int = 4
    n_down: int = 4
    n_global: int = 2
    top_k: int = 6
    tcn_layers: int = 2
    khop: int = 5
    d_embed: int = 10
    dropout: float = 0.15
    wavelet_levels: int = 2
    msa_heads: int = 2
    confidence_hidden: int = 8
    phi_steps: Tuple[float, ...] = (1.0, 2.0)
    # training
    lr: float = 1e-3
    weight_decay: float = 5e-7
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 30
    steps_per_epoch: int = 0  # 0: full pass over the training split
    lambda_imp: float = 1e-3
    lambda_load: float = 1e-3
    seed: int = 0
    dtype: str = "float32"
    threads: int = 1
    # run
    variant: str = "full"
    corrupt: str = ""  # mode:p:seed, empty for none

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        errors = [f"unknown key {k!r}" for k in sorted(set(d) - set(known))]
        kw: Dict[str, Any] = {}
        for k, v in d.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            try:
                if isinstance(default, tuple):
                    seq = v if isinstance(v, (list, tuple)) else str(v).split(",")
                    kw[k] = tuple(float(x) for x in seq)
                elif isinstance(default, bool) or not isinstance(v, (int, float, str)) or isinstance(v, bool):
                    raise TypeError
                elif isinstance(default, int) and isinstance(v, float) and not v.is_integer():
                    raise TypeError
                else:
                    kw[k] = type(default)(v)
            except (TypeError, ValueError):
                errors.append(f"{k}: cannot use {v!r} as {type(default).__name__}")
        cfg = cls(**kw)
        errors.extend(cfg.problems())
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def from_file(cls, path: Union[str, Path], **overrides) -> "RunConfig":
        d = read_flat(path)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def problems(self) -> List[str]:
        """Every validation problem (empty when the configuration is usable)."""
        out = []
        positive = ("t_p", "t_f", "d_hidden", "n_layers", "top_k", "tcn_layers", "d_embed", "wavelet_levels",
                    "msa_heads", "confidence_hidden", "batch_size", "max_epochs", "patience")
        for k in positive:
            if getattr(self, k) < 1:
                out.append(f"{k} must be >= 1")
        for k in ("n_days", "n_weeks", "n_up", "n_down", "n_global", "khop", "steps_per_epoch", "threads"):
            if getattr(self, k) < 0:
                out.append(f"{k} must be >= 0")
        if self.n_days + self.n_weeks < 1:
            out.append("n_days + n_weeks must be >= 1")
        n_e = self.n_up + self.n_down + self.n_global
        if n_e < 1:
            out.append("at least one expert is required")
        elif self.top_k > n_e:
            out.append(f"top_k={self.top_k} exceeds the number of experts ({n_e})")
        if self.msa_heads >= 1 and self.d_hidden % self.msa_heads:
            out.append(f"d_hidden={self.d_hidden} is not divisible by msa_heads={self.msa_heads}")
        if not 0 <= self.dropout < 1:
            out.append("dropout must lie in [0, 1)")
        for k in ("lr", "weight_decay", "lambda_imp", "lambda_load"):
            if getattr(self, k) < 0:
                out.append(f"{k} must be >= 0")
        ratios = (self.split_train, self.split_val, self.split_test)
        if min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
            out.append("split_train + split_val + split_test must equal 1")
        if len(self.phi_steps) != 2 or min(self.phi_steps, default=0) <= 0:
            out.append("phi_steps needs two positive distances")
        if self.dtype not in ("float32", "float64"):
            out.append("dtype must be float32 or float64")
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {', '.join(VARIANTS)}")
        if self.corrupt:
            try:
                CorruptionSpec.parse(self.corrupt)
            except ValueError as exc:
                out.append(f"corrupt: {exc}")
        return out

    def corruption(self) -> Optional[CorruptionSpec]:
        return CorruptionSpec.parse(self.corrupt) if self.corrupt else None

    def dataset(self, network, features) -> TrafficDataset:
        ds = TrafficDataset(network, features, self.t_p, self.t_f, self.n_days, self.n_weeks,
                            (self.split_train, self.split_val, self.split_test))
        spec = self.corruption()
        return ds.with_corruption(spec) if spec else ds

    def estimator(self) -> CPMoEClassifier:
        names = CPMoEClassifier().get_params()
        kw = {k: getattr(self, k) for k in names if hasattr(self, k)}
        kw["steps_per_epoch"] = self.steps_per_epoch or None
        kw["threads"] = self.threads or None
        return CPMoEClassifier(**kw)

    def dumps(self) -> str:
        """Effective configuration as TOML; feeding it back reproduces this object."""
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for k in keys:
                lines.append(f"{k} = {_toml_value(getattr(self, k))}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, tuple):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def describe_keys() -> str:
    """One line per key with its default, grouped by section (for ``--help``)."""
    d = RunConfig()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}] " + ", ".join(f"{k}={_toml_value(getattr(d, k))}" for k in keys))
    return "\n".join(lines)

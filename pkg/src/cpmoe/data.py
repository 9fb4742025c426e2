"""Road network and traffic feature containers, windowing, corruption and file IO."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

FORMAT_VERSION = 1
SPEED, LEVEL = 0, 1
N_CHANNELS = 2
N_CLASSES = 3
# speed multiplier relative to free flow for level 0 / 1 / 2
LEVEL_SPEED_FACTOR = (1.0, 0.55, 0.25)
DEFAULT_ORIGIN = datetime(2023, 9, 25)  # a Monday


class DatasetFormatError(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


@dataclass
class Link:
    id: int
    attrs: np.ndarray
    lon: float
    lat: float


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    r_km: float


@dataclass
class TrafficNetwork:
    """Directed link graph; an edge ``i -> j`` means traffic flows from i into j."""

    links: List[Link]
    edges: List[Edge]
    upstream: List[List[int]] = field(default_factory=list)
    downstream: List[List[int]] = field(default_factory=list)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_static(self) -> int:
        return len(self.links[0].attrs) if self.links else 0

    def static_attrs(self) -> np.ndarray:
        return np.array([l.attrs for l in self.links], dtype=np.float64).reshape(self.n_links, self.n_static)

    def adjacency(self, direction: str) -> np.ndarray:
        """Boolean ``[N, N]`` neighbor mask, ``M[i, j]`` true when j is a neighbor of i.

        ``direction`` is ``"upstream"``, ``"downstream"`` or ``"undirected"``.
        """
        n = self.n_links
        m = np.zeros((n, n), dtype=bool)
        for e in self.edges:
            if direction in ("upstream", "undirected"):
                m[e.dst, e.src] = True
            if direction in ("downstream", "undirected"):
                m[e.src, e.dst] = True
        if direction not in ("upstream", "downstream", "undirected"):
            raise ValueError(f"unknown direction {direction!r}")
        return m

    def distance_matrix(self) -> np.ndarray:
        """Edge distance feature r_ij in km, symmetric, zero where no edge."""
        r = np.zeros((self.n_links, self.n_links))
        for e in self.edges:
            r[e.src, e.dst] = r[e.dst, e.src] = e.r_km
        return r

    def k_hop_neighbors(self, i: int, k: int) -> Set[int]:
        return k_hop_neighbors(self, i, k)

    def k_hop_matrix(self, k: int) -> np.ndarray:
        m = np.zeros((self.n_links, self.n_links))
        for i in range(self.n_links):
            for j in k_hop_neighbors(self, i, k):
                m[i, j] = 1.0
        return m


def build_network(links: Sequence[Link], edges: Sequence[Edge]) -> TrafficNetwork:
    ids = [l.id for l in links]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate link id")
    if sorted(ids) != list(range(len(ids))):
        raise ValueError("link ids must be dense in [0, N)")
    links = sorted(links, key=lambda l: l.id)
    n = len(links)
    upstream: List[List[int]] = [[] for _ in range(n)]
    downstream: List[List[int]] = [[] for _ in range(n)]
    for e in edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            raise ValueError(f"dangling edge {e.src}->{e.dst}")
        if e.r_km < 0:
            raise ValueError(f"negative distance on edge {e.src}->{e.dst}")
        downstream[e.src].append(e.dst)
        upstream[e.dst].append(e.src)
    return TrafficNetwork(
        links=list(links),
        edges=list(edges),
        upstream=[sorted(set(u)) for u in upstream],
        downstream=[sorted(set(d)) for d in downstream],
    )


def k_hop_neighbors(net: TrafficNetwork, i: int, k: int) -> Set[int]:
    """Links within ``k`` undirected hops of ``i``, excluding ``i``."""
    if not 0 <= i < net.n_links:
        raise KeyError(f"unknown link id {i}")
    if k < 0:
        raise ValueError("k must be non-negative")
    seen = {i}
    frontier = deque([(i, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth == k:
            continue
        for nb in net.upstream[node] + net.downstream[node]:
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, depth + 1))
    seen.discard(i)
    return seen


@dataclass
class FeatureTensor:
    """Dense ``[T, N, 2]`` dynamic features (speed km/h, congestion level).

    Masked entries hold NaN and must not be read as data.
    """

    values: np.ndarray
    mask: np.ndarray
    interval_minutes: int = 5
    origin: datetime = DEFAULT_ORIGIN

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != N_CHANNELS:
            raise ValueError(f"values must be [T, N, {N_CHANNELS}], got {self.values.shape}")
        if self.mask.shape != self.values.shape[:2]:
            raise ValueError("mask shape must equal values.shape[:2]")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_links(self) -> int:
        return self.values.shape[1]

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes

    @property
    def levels(self) -> np.ndarray:
        """Integer levels with -1 where masked."""
        lv = np.where(self.mask, self.values[..., LEVEL], -1)
        return np.nan_to_num(lv, nan=-1).astype(np.int64)

    def time_of_day(self, t) -> np.ndarray:
        start = (self.origin.hour * 60 + self.origin.minute) // self.interval_minutes
        return (start + np.asarray(t)) % self.steps_per_day

    def day_of_week(self, t) -> np.ndarray:
        start = (self.origin.hour * 60 + self.origin.minute) // self.interval_minutes
        return (self.origin.weekday() + (start + np.asarray(t)) // self.steps_per_day) % 7

    def congestion_ratio(self) -> float:
        obs = self.mask.sum()
        return float((self.levels == 2).sum() / obs) if obs else 0.0

    def copy(self) -> "FeatureTensor":
        return replace(self, values=self.values.copy(), mask=self.mask.copy())


def _mode_high(levels: np.ndarray) -> int:
    counts = np.bincount(levels, minlength=N_CLASSES)
    # ties go to the higher level
    return int(N_CLASSES - 1 - np.argmax(counts[::-1]))


def aggregate_minutes(
    speed: np.ndarray,
    level: np.ndarray,
    observed: Optional[np.ndarray] = None,
    interval_minutes: int = 5,
    origin: datetime = DEFAULT_ORIGIN,
) -> FeatureTensor:
    """Aggregate ``[M, N]`` per-minute records into intervals.

    Speed is the mean over observed minutes and level the most frequent
    observed level. An interval with no observed minute is masked.
    """
    speed = np.asarray(speed, dtype=np.float64)
    level = np.asarray(level)
    if observed is None:
        observed = ~np.isnan(speed)
    observed = np.asarray(observed, dtype=bool)
    if speed.ndim == 1:
        speed, level, observed = speed[:, None], level[:, None], observed[:, None]
    M, N = speed.shape
    if M % interval_minutes:
        raise ValueError(f"{M} minute rows do not divide into {interval_minutes}-minute intervals")
    T = M // interval_minutes
    sp = speed.reshape(T, interval_minutes, N)
    lv = level.reshape(T, interval_minutes, N)
    ob = observed.reshape(T, interval_minutes, N)
    values = np.full((T, N, N_CHANNELS), np.nan)
    mask = ob.any(axis=1)
    for t, i in zip(*np.nonzero(mask)):
        keep = ob[t, :, i]
        values[t, i, SPEED] = sp[t, keep, i].mean()
        values[t, i, LEVEL] = _mode_high(lv[t, keep, i].astype(np.int64))
    return FeatureTensor(values, mask, interval_minutes, origin)


@dataclass
class HistoricalFeatureSet:
    daily: np.ndarray  # [N_d, T_f, N, C]
    weekly: np.ndarray  # [N_w, T_f, N, C]
    daily_index: np.ndarray  # [N_d, T_f] time indices
    weekly_index: np.ndarray  # [N_w, T_f]


def history_indices(
    t: int, t_f: int, n_days: int, n_weeks: int, steps_per_day: int = 288
) -> Tuple[np.ndarray, np.ndarray]:
    steps = np.arange(1, t_f + 1)
    daily = np.array([t + steps - d * steps_per_day for d in range(1, n_days + 1)], dtype=np.int64)
    weekly = np.array([t + steps - w * 7 * steps_per_day for w in range(1, n_weeks + 1)], dtype=np.int64)
    return daily.reshape(n_days, t_f), weekly.reshape(n_weeks, t_f)


def extract_history(
    features: Union[FeatureTensor, np.ndarray],
    t: int,
    t_f: int = 12,
    n_days: int = 4,
    n_weeks: int = 3,
    steps_per_day: int = 288,
) -> HistoricalFeatureSet:
    """Daily and weekly lag windows aligned with the label window ``[t+1, t+t_f]``."""
    values = features.values if isinstance(features, FeatureTensor) else np.asarray(features)
    d_idx, w_idx = history_indices(t, t_f, n_days, n_weeks, steps_per_day)
    lo = min([values.shape[0]] + [int(a.min()) for a in (d_idx, w_idx) if a.size])
    if lo < 0:
        raise InsufficientHistory(f"origin {t} lacks history back to index {lo}")
    return HistoricalFeatureSet(values[d_idx], values[w_idx], d_idx, w_idx)


def earliest_origin(t_p: int, n_days: int, n_weeks: int, steps_per_day: int = 288) -> int:
    return max(t_p - 1, n_days * steps_per_day - 1, n_weeks * 7 * steps_per_day - 1)


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str  # "mask" or "flip"
    p: float  # percentage of observed entries
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mask", "flip"):
            raise ValueError(f"corruption mode must be 'mask' or 'flip', got {self.mode!r}")
        if not 0 <= self.p <= 100:
            raise ValueError(f"corruption percentage must be in [0, 100], got {self.p}")

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        """Parse ``mode:p:seed`` (seed optional)."""
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"expected mode:p[:seed], got {text!r}")
        return cls(parts[0], float(parts[1]), int(parts[2]) if len(parts) == 3 else 0)


def corrupt(
    features: FeatureTensor,
    spec: CorruptionSpec,
    time_range: Optional[Tuple[int, int]] = None,
) -> FeatureTensor:
    """Mask or flip ``floor(p% * observed)`` entries inside ``time_range`` (half open).

    Flipping draws a different level uniformly and rescales the speed by the
    ratio of the level speed factors. Returns a new tensor.
    """
    out = features.copy()
    if spec.p == 0:
        return out
    lo, hi = time_range if time_range is not None else (0, features.n_steps)
    window = np.zeros_like(out.mask)
    window[lo:hi] = True
    cand = np.flatnonzero(out.mask & window)
    k = int(math.floor(spec.p / 100.0 * cand.size + 1e-9))
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(cand, size=k, replace=False))
    t_idx, l_idx = np.unravel_index(chosen, out.mask.shape)
    if spec.mode == "mask":
        out.mask[t_idx, l_idx] = False
        out.values[t_idx, l_idx, :] = np.nan
    else:
        old = out.values[t_idx, l_idx, LEVEL].astype(np.int64)
        new = (old + rng.integers(1, N_CLASSES, size=k)) % N_CLASSES
        factor = np.asarray(LEVEL_SPEED_FACTOR)
        out.values[t_idx, l_idx, SPEED] *= factor[new] / factor[old]
        out.values[t_idx, l_idx, LEVEL] = new
    return out


def split_counts(n: int, ratios: Sequence[float] = (0.7, 0.1, 0.2)) -> Tuple[int, int, int]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(
    origins: Sequence[int], ratios: Sequence[float] = (0.7, 0.1, 0.2), horizon: int = 0
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous chronological split of prediction origins.

    Counts follow :func:`split_counts`. With ``horizon > 0`` the origins whose
    label window ``[t+1, t+horizon]`` would reach past the first origin of the
    next nonempty split are dropped afterwards.
    """
    origins = np.sort(np.asarray(origins, dtype=np.int64))
    if origins.size == 0:
        raise ValueError("series too short: no eligible prediction origin")
    a, b, _ = split_counts(origins.size, ratios)
    parts = [origins[:a], origins[a:a + b], origins[a + b:]]
    if horizon > 0:
        for i in (0, 1):
            later = [p for p in parts[i + 1:] if p.size]
            if later:
                parts[i] = parts[i][parts[i] + horizon <= later[0][0]]
    return parts[0], parts[1], parts[2]


def forward_fill(values: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Fill NaNs along axis 0 with the last finite value, else ``fallback[link, channel]``."""
    T = values.shape[0]
    finite = ~np.isnan(values)
    idx = np.where(finite, np.arange(T)[:, None, None], -1)
    np.maximum.accumulate(idx, axis=0, out=idx)
    filled = np.take_along_axis(values, np.maximum(idx, 0), axis=0)
    return np.where(idx >= 0, filled, fallback[None])


class TrafficDataset:
    """Network plus features with windowing, splits and batch assembly.

    Labels always come from ``features``. Training instances read their
    inputs from ``train_features`` when a training-split corruption is set.
    """

    def __init__(
        self,
        network: TrafficNetwork,
        features: FeatureTensor,
        t_p: int = 12,
        t_f: int = 12,
        n_days: int = 4,
        n_weeks: int = 3,
        ratios: Sequence[float] = (0.7, 0.1, 0.2),
        train_features: Optional[FeatureTensor] = None,
    ):
        if features.n_links != network.n_links:
            raise ValueError(
                f"features cover {features.n_links} links but the network has {network.n_links}"
            )
        self.network = network
        self.features = features
        self.t_p, self.t_f = t_p, t_f
        self.n_days, self.n_weeks = n_days, n_weeks
        self.ratios = tuple(ratios)
        self.train_features = train_features
        first = earliest_origin(t_p, n_days, n_weeks, features.steps_per_day)
        last = features.n_steps - 1 - t_f
        self.origins = np.arange(first, last + 1, dtype=np.int64)
        if self.origins.size == 0:
            raise ValueError(
                f"series of {features.n_steps} steps is too short for T_p={t_p}, T_f={t_f}, "
                f"N_d={n_days}, N_w={n_weeks}"
            )
        self.train_origins, self.val_origins, self.test_origins = split(self.origins, self.ratios, t_f)
        self._filled: Dict[str, np.ndarray] = {}

    @property
    def n_links(self) -> int:
        return self.network.n_links

    @property
    def steps_per_day(self) -> int:
        return self.features.steps_per_day

    @property
    def history_length(self) -> int:
        return self.t_f * (self.n_days + self.n_weeks)

    def split_origins(self, name: str) -> np.ndarray:
        try:
            return {"train": self.train_origins, "val": self.val_origins, "test": self.test_origins,
                    "all": self.origins}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def train_period(self) -> Tuple[int, int]:
        """Half-open range of time indices observed while training."""
        if self.train_origins.size == 0:
            return 0, 0
        return 0, int(self.train_origins[-1]) + self.t_f + 1

    def training_means(self) -> np.ndarray:
        """Per-link, per-channel mean over the observed training period, ``[N, C]``."""
        lo, hi = self.train_period()
        vals = self.features.values[lo:hi]
        with np.errstate(invalid="ignore"):
            means = np.nanmean(vals, axis=0) if vals.size else np.full((self.n_links, N_CHANNELS), np.nan)
        glob = np.nanmean(self.features.values.reshape(-1, N_CHANNELS), axis=0)
        return np.where(np.isnan(means), glob[None], means)

    def with_corruption(self, spec: CorruptionSpec) -> "TrafficDataset":
        corrupted = corrupt(self.features, spec, time_range=self.train_period())
        return TrafficDataset(self.network, self.features, self.t_p, self.t_f, self.n_days,
                              self.n_weeks, self.ratios, train_features=corrupted)

    def inputs(self, split_name: str) -> np.ndarray:
        """Forward-filled ``[T, N, C]`` input values used for ``split_name`` instances."""
        key = "train" if split_name == "train" and self.train_features is not None else "clean"
        if key not in self._filled:
            self._filled[key] = forward_fill(self._raw(key), self.training_means())
        return self._filled[key]

    def _raw(self, key: str) -> np.ndarray:
        name = "raw_" + key
        if name not in self._filled:
            src = self.train_features if key == "train" else self.features
            self._filled[name] = np.where(src.mask[..., None], src.values, np.nan)
        return self._filled[name]

    def labels(self) -> Tuple[np.ndarray, np.ndarray]:
        if "levels" not in self._filled:
            self._filled["levels"] = self.features.levels.clip(min=0)
        return self._filled["levels"], self.features.mask

    def batch(self, origins: Sequence[int], split_name: str = "test") -> Dict[str, np.ndarray]:
        """Assemble arrays for a list of origins.

        Keys: ``recent [B,T_p,N,C]``, ``history [B,L_h,N,C]``, ``history_tod``,
        ``history_dow [B,L_h]``, ``tod``, ``dow [B]``, ``labels [B,T_f,N]``,
        ``label_mask [B,T_f,N]``, ``origin [B]``, ``raw_recent`` (unfilled, NaN where masked).
        """
        t = np.asarray(origins, dtype=np.int64)
        X = self.inputs(split_name)
        rec_idx = t[:, None] + np.arange(-self.t_p + 1, 1)[None]
        lab_idx = t[:, None] + np.arange(1, self.t_f + 1)[None]
        offsets = np.concatenate([a.reshape(-1) for a in history_indices(
            0, self.t_f, self.n_days, self.n_weeks, self.steps_per_day)])
        hist = t[:, None] + offsets[None]
        if hist.size and hist.min() < 0:
            raise InsufficientHistory("an origin lacks daily/weekly history")
        levels, mask = self.labels()
        raw = self._raw("train" if split_name == "train" and self.train_features is not None else "clean")
        return {
            "origin": t,
            "recent": X[rec_idx],
            "raw_recent": raw[rec_idx],
            "history": X[hist],
            "history_tod": self.features.time_of_day(hist),
            "history_dow": self.features.day_of_week(hist),
            "tod": self.features.time_of_day(t),
            "dow": self.features.day_of_week(t),
            "labels": levels[lab_idx],
            "label_mask": mask[lab_idx],
        }


# --- files -----------------------------------------------------------------

def save_network(path: Union[str, Path], net: TrafficNetwork) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "links": [
            {"id": l.id, "attrs": [float(a) for a in l.attrs], "lon": float(l.lon), "lat": float(l.lat)}
            for l in net.links
        ],
        "edges": [{"from": e.src, "to": e.dst, "r_km": float(e.r_km)} for e in net.edges],
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")


def load_network(path: Union[str, Path]) -> TrafficNetwork:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"network file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("format_version") != FORMAT_VERSION:
            raise DatasetFormatError(
                f"{path}: format_version {doc.get('format_version')} != {FORMAT_VERSION}"
            )
        links = [Link(int(l["id"]), np.asarray(l["attrs"], dtype=np.float64), float(l["lon"]), float(l["lat"]))
                 for l in doc["links"]]
        edges = [Edge(int(e["from"]), int(e["to"]), float(e["r_km"])) for e in doc["edges"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{path}: malformed network file ({exc})") from exc
    return build_network(links, edges)


def save_features(path: Union[str, Path], feats: FeatureTensor) -> None:
    T, N = feats.mask.shape
    t = np.repeat(np.arange(T), N)
    link = np.tile(np.arange(N), T)
    obs = feats.mask.reshape(-1)
    speed = feats.values[..., SPEED].reshape(-1)
    level = feats.values[..., LEVEL].reshape(-1)
    df = pd.DataFrame({
        "t": t,
        "link_id": link,
        "speed": np.where(obs, speed, np.nan),
        "level": pd.array(np.where(obs, level, 0).astype(np.int64), dtype="Int64"),
        "observed": obs.astype(np.int64),
    })
    df.loc[~obs, "level"] = pd.NA
    df.to_csv(path, index=False, float_format=None, na_rep="")


def load_features(
    path: Union[str, Path],
    n_links: Optional[int] = None,
    interval_minutes: int = 5,
    origin: datetime = DEFAULT_ORIGIN,
) -> FeatureTensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"features file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except Exception as exc:  # pandas raises several parser error types
        raise DatasetFormatError(f"{path}: unreadable features file ({exc})") from exc
    expected = ["t", "link_id", "speed", "level", "observed"]
    if list(df.columns) != expected:
        raise DatasetFormatError(f"{path}: header must be {','.join(expected)}, got {','.join(df.columns)}")
    N = int(df["link_id"].max()) + 1 if n_links is None else n_links
    T = int(df["t"].max()) + 1
    values = np.full((T, N, N_CHANNELS), np.nan)
    mask = np.zeros((T, N), dtype=bool)
    t = df["t"].to_numpy(np.int64)
    l = df["link_id"].to_numpy(np.int64)
    obs = df["observed"].to_numpy(np.int64).astype(bool)
    if (l < 0).any() or (l >= N).any():
        raise DatasetFormatError(f"{path}: link_id out of range for {N} links")
    mask[t, l] = obs
    values[t[obs], l[obs], SPEED] = df["speed"].to_numpy(np.float64)[obs]
    values[t[obs], l[obs], LEVEL] = df["level"].to_numpy(np.float64)[obs]
    if np.isnan(values[mask]).any():
        raise DatasetFormatError(f"{path}: observed row without speed or level")
    return FeatureTensor(values, mask, interval_minutes, origin)


def save_dataset(directory: Union[str, Path], network: TrafficNetwork, features: FeatureTensor) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_network(d / "network.json", network)
    save_features(d / "features.csv", features)
    meta = {"format_version": FORMAT_VERSION, "interval_minutes": features.interval_minutes,
            "origin": features.origin.isoformat()}
    (d / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_dataset(directory: Union[str, Path]) -> Tuple[TrafficNetwork, FeatureTensor]:
    d = Path(directory)
    net = load_network(d / "network.json")
    interval, origin = 5, DEFAULT_ORIGIN
    meta_path = d / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise DatasetFormatError(f"{meta_path}: unsupported format_version {meta.get('format_version')}")
        interval = int(meta.get("interval_minutes", 5))
        origin = datetime.fromisoformat(meta.get("origin", DEFAULT_ORIGIN.isoformat()))
    feats = load_features(d / "features.csv", n_links=net.n_links, interval_minutes=interval, origin=origin)
    return net, feats

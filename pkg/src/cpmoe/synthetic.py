"""Synthetic road networks and congestion series.

The generator plants the phenomena a congestion model is expected to pick
up: weekday peak-hour congestion on designated links, incident congestion
that spreads from a link to its upstream neighbors after a fixed delay,
long persistent episodes, and Gaussian speed noise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from typing import Dict, List, Tuple

import numpy as np

from .data import (
    LEVEL,
    LEVEL_SPEED_FACTOR,
    N_CHANNELS,
    SPEED,
    Edge,
    FeatureTensor,
    Link,
    TrafficNetwork,
    build_network,
)

TOPOLOGIES = ("chain", "grid", "random-dag")


@dataclass
class ScenarioConfig:
    n_links: int = 30
    topology: str = "grid"
    days: int = 14
    origin: str = "2023-09-27T00:00"  # a Wednesday, so the tail of a 14-day series is weekdays
    interval_minutes: int = 5
    # peak windows as "start_hour-end_hour" pairs, comma separated
    peak_windows: str = "7.5-9.0,17.5-19.0"
    peak_link_fraction: float = 0.3
    peak_weekdays_only: bool = True
    peak_jitter: int = 2
    base_congestion_prob: float = 0.001
    incident_duration: int = 18
    propagation_delay: int = 3
    propagation_strength: float = 0.7
    trend_prob: float = 0.0004
    trend_persistence: int = 48
    trend_level: int = 1
    slow_shoulder: int = 2
    noise_level: float = 0.05
    missing_ratio: float = 0.007
    seed: int = 0

    def validate(self) -> None:
        errors = []
        if self.n_links < 1:
            errors.append("n_links must be >= 1")
        if self.topology not in TOPOLOGIES:
            errors.append(f"topology must be one of {TOPOLOGIES}")
        if self.days < 2:
            errors.append("days must be >= 2")
        for name in ("peak_link_fraction", "base_congestion_prob", "propagation_strength",
                     "trend_prob", "missing_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errors.append(f"{name} must be in [0, 1], got {v}")
        for name in ("incident_duration", "propagation_delay", "trend_persistence"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.peak_jitter < 0 or self.slow_shoulder < 0 or self.noise_level < 0:
            errors.append("peak_jitter, slow_shoulder and noise_level must be non-negative")
        if self.trend_level not in (1, 2):
            errors.append("trend_level must be 1 or 2")
        if 1440 % self.interval_minutes:
            errors.append("interval_minutes must divide a day")
        try:
            self.windows()
            datetime.fromisoformat(self.origin)
        except ValueError as exc:
            errors.append(str(exc))
        if errors:
            raise ValueError("invalid scenario: " + "; ".join(errors))

    def windows(self) -> List[Tuple[float, float]]:
        out = []
        for part in filter(None, (p.strip() for p in self.peak_windows.split(","))):
            lo, hi = (float(x) for x in part.split("-"))
            if not 0 <= lo < hi <= 24:
                raise ValueError(f"bad peak window {part!r}")
            out.append((lo, hi))
        return out

    @property
    def steps_per_day(self) -> int:
        return 1440 // self.interval_minutes

    @classmethod
    def from_dict(cls, d: Dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown scenario keys: {', '.join(unknown)}")
        kw = {}
        for k, v in d.items():
            default = getattr(cls, k)
            kw[k] = type(default)(v) if not isinstance(default, bool) else _as_bool(v)
        return cls(**kw)

    def to_dict(self) -> Dict:
        return asdict(self)


def _as_bool(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return bool(v)


def _haversine_km(lon1, lat1, lon2, lat2) -> float:
    r = 6371.0
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def make_network(n_links: int, topology: str, rng: np.random.Generator) -> TrafficNetwork:
    """Links laid out on a lattice near (116.40E, 39.90N) with static attributes
    ``[length_km, lanes, speed_limit_kmh, width_m]``."""
    if topology == "grid":
        cols = int(math.ceil(math.sqrt(n_links)))
        pos = [(i % cols, i // cols) for i in range(n_links)]
    else:
        pos = [(i, 0) for i in range(n_links)]
    links = []
    for i, (x, y) in enumerate(pos):
        lanes = int(rng.integers(2, 5))
        limit = float(rng.choice([40.0, 50.0, 60.0, 80.0]))
        length = float(rng.uniform(0.3, 1.2))
        attrs = np.array([length, lanes, limit, 3.5 * lanes])
        links.append(Link(i, attrs, 116.40 + 0.006 * x, 39.90 + 0.006 * y))

    pairs = []
    if topology == "chain":
        pairs = [(i, i + 1) for i in range(n_links - 1)]
    elif topology == "grid":
        cols = int(math.ceil(math.sqrt(n_links)))
        for i in range(n_links):
            if (i % cols) + 1 < cols and i + 1 < n_links:
                pairs.append((i, i + 1))
            if i + cols < n_links:
                pairs.append((i, i + cols))
    else:
        for i in range(n_links - 1):
            span = min(3, n_links - 1 - i)
            targets = rng.choice(np.arange(i + 1, i + 1 + span), size=min(span, int(rng.integers(1, 3))),
                                 replace=False)
            pairs.extend((i, int(j)) for j in sorted(targets))
    edges = [
        Edge(a, b, _haversine_km(links[a].lon, links[a].lat, links[b].lon, links[b].lat))
        for a, b in pairs
    ]
    return build_network(links, edges)


def _fill_runs(flags: np.ndarray, starts: np.ndarray, length: int) -> None:
    T = flags.shape[0]
    for t, i in zip(*np.nonzero(starts)):
        flags[t:min(T, t + length), i] = True


def _dilate(flags: np.ndarray, width: int) -> np.ndarray:
    out = flags.copy()
    for s in range(1, width + 1):
        out[s:] |= flags[:-s]
        out[:-s] |= flags[s:]
    return out


def generate_synthetic(cfg: ScenarioConfig) -> Tuple[TrafficNetwork, FeatureTensor]:
    """Generate a network and its ``[days * steps_per_day, N, 2]`` feature tensor."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    net = make_network(cfg.n_links, cfg.topology, rng)
    N, spd = cfg.n_links, cfg.steps_per_day
    T = cfg.days * spd
    origin = datetime.fromisoformat(cfg.origin)
    start_slot = (origin.hour * 60 + origin.minute) // cfg.interval_minutes
    slot = (start_slot + np.arange(T)) % spd
    dow = (origin.weekday() + (start_slot + np.arange(T)) // spd) % 7

    # periodic peaks on designated links
    source = np.zeros((T, N), dtype=bool)
    n_peak = int(round(cfg.peak_link_fraction * N))
    peak_links = np.sort(rng.choice(N, size=n_peak, replace=False)) if n_peak else np.array([], int)
    steps_per_hour = 60 / cfg.interval_minutes
    for lo, hi in cfg.windows():
        a, b = int(round(lo * steps_per_hour)), int(round(hi * steps_per_hour))
        in_win = (slot >= a) & (slot < b)
        if cfg.peak_weekdays_only:
            in_win &= dow < 5
        for i in peak_links:
            if cfg.peak_jitter:
                day = (start_slot + np.arange(T)) // spd
                jit = rng.integers(-cfg.peak_jitter, cfg.peak_jitter + 1, size=(cfg.days + 2, 2))
                s_adj = slot - jit[day, 0]
                e_adj = slot - jit[day, 1]
                win = (s_adj >= a) & (e_adj < b)
                if cfg.peak_weekdays_only:
                    win &= dow < 5
                source[:, i] |= win
            else:
                source[:, i] |= in_win

    # random incidents
    onsets = rng.random((T, N)) < cfg.base_congestion_prob
    _fill_runs(source, onsets, cfg.incident_duration)

    # spread to upstream neighbors after a delay; one draw per (run, edge)
    up = np.zeros((N, N), dtype=bool)  # up[i, j]: j is upstream of i
    for i in range(N):
        up[i, net.upstream[i]] = True
    delay = cfg.propagation_delay
    cong = np.zeros((T, N), dtype=bool)
    spread = np.zeros((T + delay, N), dtype=bool)
    active = np.zeros((N, N), dtype=bool)
    prev = np.zeros(N, dtype=bool)
    for t in range(T):
        cur = source[t] | spread[t]
        cong[t] = cur
        started = cur & ~prev
        if started.any():
            draws = rng.random((int(started.sum()), N)) < cfg.propagation_strength
            active[started] = draws & up[started]
        active[~cur] = False
        spread[t + delay] |= (active & cur[:, None]).any(axis=0)
        prev = cur

    level = np.where(cong, 2, 0)
    # slow shoulders around congestion
    shoulder = _dilate(cong, cfg.slow_shoulder) & ~cong
    level[shoulder] = 1
    # persistent trend episodes
    trend = np.zeros((T, N), dtype=bool)
    _fill_runs(trend, rng.random((T, N)) < cfg.trend_prob, cfg.trend_persistence)
    level = np.where(trend & (level < cfg.trend_level), cfg.trend_level, level)

    free_flow = net.static_attrs()[:, 2] * 0.9
    factor = np.asarray(LEVEL_SPEED_FACTOR)[level]
    speed = free_flow[None] * factor * (1.0 + cfg.noise_level * rng.standard_normal((T, N)))
    speed = np.maximum(speed, 1.0)

    values = np.empty((T, N, N_CHANNELS))
    values[..., SPEED] = speed
    values[..., LEVEL] = level
    mask = rng.random((T, N)) >= cfg.missing_ratio
    values[~mask] = np.nan
    return net, FeatureTensor(values, mask, cfg.interval_minutes, origin)


def conditional_spread_frequency(net: TrafficNetwork, feats: FeatureTensor, delay: int) -> float:
    """Fraction of (congested link i at t, upstream j) pairs with j congested at t + delay."""
    lv = feats.levels
    hits = total = 0
    T = feats.n_steps
    for i in range(net.n_links):
        for j in net.upstream[i]:
            src = (lv[:T - delay, i] == 2)
            tgt = lv[delay:, j]
            ok = src & (tgt >= 0)
            total += int(ok.sum())
            hits += int((ok & (tgt == 2)).sum())
    return hits / total if total else float("nan")

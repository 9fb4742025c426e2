"""Prediction tables and expert-weight interpretability reports.

Everything here produces plain CSV/JSON so plots can be made elsewhere.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from .data import LEVEL, SPEED, FeatureTensor
from .metrics import evaluate
from .model import ModelOutput

PRED_COLUMNS = ("t", "link_id", "step", "level", "logit0", "logit1", "logit2", "w_per", "w_tr", "w_m")
WEIGHTS = ("w_per", "w_tr", "w_m")


def prediction_frame(output: ModelOutput, origins) -> pd.DataFrame:
    """Flatten a forward pass into one row per ``(t, link, step)``; ``step`` counts from 1."""
    logits = output.logits.detach().double().numpy()  # [B, T_f, N, 3]
    B, T, N, _ = logits.shape
    t, step, link = np.meshgrid(np.asarray(origins), np.arange(1, T + 1), np.arange(N), indexing="ij")
    cols = {
        "t": t.ravel(),
        "link_id": link.ravel(),
        "step": step.ravel(),
        "level": logits.argmax(-1).ravel(),
        "logit0": logits[..., 0].ravel(),
        "logit1": logits[..., 1].ravel(),
        "logit2": logits[..., 2].ravel(),
    }
    for name in WEIGHTS:
        cols[name] = getattr(output, name).detach().double().numpy().ravel()
    return pd.DataFrame(cols, columns=PRED_COLUMNS).sort_values(["t", "link_id", "step"], kind="stable")


def weight_histogram(preds: pd.DataFrame, bins: int = 10) -> pd.DataFrame:
    """Counts of each effective weight over ``bins`` equal bins on [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {"bin_lo": edges[:-1], "bin_hi": edges[1:]}
    for name in WEIGHTS:
        out[name], _ = np.histogram(np.clip(preds[name].to_numpy(), 0.0, 1.0), bins=edges)
    return pd.DataFrame(out)


def dominance(preds: pd.DataFrame, threshold: float = 0.5) -> pd.Series:
    """Label each row ``periodic``, ``trend`` or ``magl`` by which weight exceeds ``threshold``."""
    lab = np.full(len(preds), "magl", dtype=object)
    lab[preds["w_tr"].to_numpy() > threshold] = "trend"
    lab[preds["w_per"].to_numpy() > threshold] = "periodic"
    return pd.Series(lab, index=preds.index, name="dominant")


def attach_labels(preds: pd.DataFrame, features: FeatureTensor) -> pd.DataFrame:
    """Add the true level at ``t + step`` and whether it was observed."""
    idx = preds["t"].to_numpy() + preds["step"].to_numpy()
    link = preds["link_id"].to_numpy()
    inside = (idx >= 0) & (idx < features.n_steps)
    safe = np.where(inside, idx, 0)
    out = preds.copy()
    out["label"] = np.where(inside, features.levels[safe, link], -1)
    out["observed"] = inside & features.mask[safe, link]
    return out


def group_metrics(labelled: pd.DataFrame, threshold: float = 0.5) -> pd.DataFrame:
    """Metrics overall and within each dominance group."""
    groups = dominance(labelled, threshold)
    rows = []
    for name in ("all", "periodic", "trend", "magl"):
        sel = labelled if name == "all" else labelled[groups == name]
        sel = sel[sel["observed"]]
        rep = evaluate(sel["label"].to_numpy(), sel["level"].to_numpy())
        rows.append({"group": name, **rep.as_row()})
    return pd.DataFrame(rows)


def dominant_samples(
    preds: pd.DataFrame, features: FeatureTensor, t_p: int, threshold: float = 0.5, context_days: int = 1
) -> Dict[str, list]:
    """Per dominance subset, the (t, link) samples with their recent window and the
    same window ``context_days`` days back, for inspection."""
    groups = dominance(preds, threshold)
    spd = features.steps_per_day
    out: Dict[str, list] = {}
    for name in ("periodic", "trend"):
        sel = preds[groups == name]
        samples = []
        for (t, link), g in sel.groupby(["t", "link_id"], sort=True):
            rec = np.arange(t - t_p + 1, t + 1)
            sample = {
                "t": int(t),
                "link_id": int(link),
                "steps": g["step"].astype(int).tolist(),
                "w_per": g["w_per"].round(6).tolist(),
                "w_tr": g["w_tr"].round(6).tolist(),
                "recent_speed": _series(features, rec, link, SPEED),
                "recent_level": _series(features, rec, link, LEVEL),
            }
            for d in range(1, context_days + 1):
                sample[f"level_{d}d_before"] = _series(features, rec - d * spd, link, LEVEL)
            samples.append(sample)
        out[name] = samples
    return out


def _series(features: FeatureTensor, idx: np.ndarray, link: int, channel: int) -> list:
    vals = []
    for t in idx:
        if 0 <= t < features.n_steps and features.mask[t, link]:
            vals.append(round(float(features.values[t, link, channel]), 6))
        else:
            vals.append(None)
    return vals


def write_report(
    preds: pd.DataFrame,
    features: FeatureTensor,
    out_dir: Union[str, Path],
    t_p: int = 12,
    threshold: float = 0.5,
    bins: int = 10,
) -> Dict[str, object]:
    """Write ``weight_histogram.csv``, ``dominant_rows.csv``, ``dominant_samples.json``,
    ``group_metrics.csv`` and ``summary.json``; returns the summary."""
    missing = [c for c in ("t", "link_id", "step", "level", *WEIGHTS) if c not in preds.columns]
    if missing:
        raise ValueError(f"prediction table lacks columns {missing}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weight_histogram(preds, bins).to_csv(out / "weight_histogram.csv", index=False)
    labelled = attach_labels(preds, features)
    groups = dominance(labelled, threshold)
    dom = labelled.assign(dominant=groups)[groups != "magl"]
    dom.to_csv(out / "dominant_rows.csv", index=False)
    with open(out / "dominant_samples.json", "w") as fh:
        json.dump(dominant_samples(preds, features, t_p, threshold), fh, indent=1)
    gm = group_metrics(labelled, threshold)
    gm.to_csv(out / "group_metrics.csv", index=False)
    counts = groups.value_counts()
    n = len(preds)
    summary = {
        "n_rows": n,
        "threshold": threshold,
        "fraction": {g: (float(counts.get(g, 0)) / n if n else 0.0) for g in ("periodic", "trend", "magl")},
        "c_f1": dict(zip(gm["group"], gm["c_f1"].astype(float))),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    return summary


def read_predictions(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prediction file not found: {path}")
    return pd.read_csv(path)

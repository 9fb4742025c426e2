"""Command line entry point: ``cpmoe <command> ...``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 gradient check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch

from .baselines import CurrentTimeBaseline, HistoricalAverageBaseline
from .config import ConfigError, RunConfig, describe_keys, read_flat
from .data import DatasetFormatError, InsufficientHistory, TrafficDataset, load_dataset, save_dataset
from .estimator import CPMoEClassifier, evaluate_on
from .losses import ordinal_targets, total_loss
from .metrics import METRIC_COLUMNS
from .nncore import CheckpointError, finite_difference_check
from .report import prediction_frame, read_predictions, write_report
from .synthetic import ScenarioConfig, generate_synthetic
from .training import TrainingDiverged, batch_tensors

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
BASELINES = {"ct-baseline": CurrentTimeBaseline, "ha-baseline": HistoricalAverageBaseline}

log = logging.getLogger("cpmoe")


class GradCheckFailed(RuntimeError):
    pass


# --- helpers -----------------------------------------------------------------

def _run_config(path: Optional[str], **overrides) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_file(path, **overrides)


def _dataset(cfg: RunConfig, data_dir: str) -> TrafficDataset:
    net, feats = load_dataset(data_dir)
    return cfg.dataset(net, feats)


def _set_threads(n: Optional[int]) -> None:
    if n:
        torch.set_num_threads(n)


def _load_model(ckpt: str, data_dir: str):
    """Restore a checkpoint together with the dataset it expects (clean inputs)."""
    from .nncore import load_checkpoint

    _, meta = load_checkpoint(ckpt)
    if "run" not in meta:
        raise CheckpointError(f"{ckpt} carries no run configuration")
    cfg = replace(RunConfig.from_dict(meta["run"]), corrupt="")
    ds = _dataset(cfg, data_dir)
    return CPMoEClassifier.load(ckpt, ds), ds, cfg


def _parse_at(text: str, ds: TrafficDataset) -> np.ndarray:
    if text in ("train", "val", "test", "all"):
        return ds.split_origins(text)
    try:
        if ":" in text:
            lo, hi = (int(x) for x in text.split(":"))
            return np.arange(lo, hi, dtype=np.int64)
        return np.asarray([int(x) for x in text.split(",")], dtype=np.int64)
    except ValueError:
        raise ValueError(f"--at expects an index, a comma list, lo:hi or a split name, got {text!r}") from None


# --- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    d = read_flat(args.scenario) if args.scenario else {}
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = ScenarioConfig.from_dict(d)
    cfg.validate()
    net, feats = generate_synthetic(cfg)
    save_dataset(args.out, net, feats)
    days = feats.n_steps / feats.steps_per_day
    print(f"N={net.n_links} days={days:g} congestion_ratio={feats.congestion_ratio():.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args.config, variant=args.variant, corrupt=args.corrupt, threads=args.threads)
    _set_threads(cfg.threads)
    ds = _dataset(cfg, args.data)
    est = cfg.estimator().fit(ds)
    run = asdict(cfg)
    run["phi_steps"] = list(cfg.phi_steps)
    out = Path(args.out)
    est.save(out, extra={"run": run})
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    est.result_.write_log(log_path)
    out.with_name(out.name + ".config.toml").write_text(cfg.dumps())
    print(f"best epoch {est.result_.best_epoch} val C-F1 {est.result_.best_val_cf1:.4f}; "
          f"wrote {out} and {log_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _set_threads(args.threads)
    if args.ckpt in BASELINES:
        ds = _dataset(_run_config(args.config), args.data)
        model = BASELINES[args.ckpt]().fit(ds)
        origins = ds.split_origins(args.split)
        report = evaluate_on(ds, origins, model.predict(ds, origins, args.split))
    else:
        est, ds, _ = _load_model(args.ckpt, args.data)
        report = est.score_report(ds, args.split)
    row = {"model": Path(args.ckpt).name, "split": args.split, **report.as_row()}
    pd.DataFrame([row], columns=["model", "split", *METRIC_COLUMNS]).to_csv(args.out, index=False)
    print(f"[{args.split}] {report.headline()}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _set_threads(args.threads)
    est, ds, _ = _load_model(args.ckpt, args.data)
    origins = _parse_at(args.at, ds)
    frames = []
    for s in range(0, len(origins), 64):
        chunk = origins[s:s + 64]
        frames.append(prediction_frame(est.forward_details(ds, chunk, "all"), chunk))
    preds = pd.concat(frames, ignore_index=True)
    preds.to_csv(args.out, index=False, float_format="%.9g")
    print(f"wrote {len(preds)} rows for {len(origins)} origin(s) to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    preds = read_predictions(args.preds)
    _, feats = load_dataset(args.labels)
    summary = write_report(preds, feats, args.out, t_p=args.t_p, threshold=args.threshold, bins=args.bins)
    frac = summary["fraction"]
    print(f"periodic-dominated {frac['periodic']:.3f}, trend-dominated {frac['trend']:.3f}, "
          f"C-F1 {summary['c_f1']['all']:.4f}; wrote {args.out}")
    return EXIT_OK


def gradcheck(cfg: RunConfig, ds: TrafficDataset, samples: int = 1, coords: int = 32, tol: float = 1e-4,
              h: float = 1e-5):
    """Finite-difference check of the total training loss in 64-bit precision."""
    est = replace(cfg, dtype="float64").estimator().initialize(ds)
    model = est.model_
    model.train()
    origins = ds.train_origins[:samples]
    if origins.size == 0:
        raise ValueError("no training origin available for the gradient check")
    b = batch_tensors(ds.batch(origins, "train"), est.normalizer_, torch.float64)
    targets = torch.from_numpy(ordinal_targets(None if cfg.variant == "WoR" else cfg.phi_steps))
    k = est.config_.magl.top_k

    def objective():
        # fresh generator per call so gate noise and dropout masks are fixed
        out = model(b, est.graph_, generator=torch.Generator().manual_seed(cfg.seed))
        loss, _ = total_loss(out.logits, b["labels"], b["label_mask"], [d.gate for d in out.diagnostics],
                             targets, k, cfg.lambda_imp, cfg.lambda_load)
        return loss

    return finite_difference_check(objective, model, h=h, tol=tol, coords_per_tensor=coords, seed=cfg.seed)


def cmd_gradcheck(args) -> int:
    _set_threads(args.threads)
    cfg = _run_config(args.config)
    ds = _dataset(cfg, args.data)
    report = gradcheck(cfg, ds, args.samples, args.coords, args.tol)
    name, worst = report.worst()
    print(f"max relative error {report.max_rel_error:.3e} over {report.n_coordinates} coordinates "
          f"(worst: {name} {worst:.3e}, tol {report.tol:g})")
    if not report.passed:
        raise GradCheckFailed(f"gradient check failed: {report.max_rel_error:.3e} > {report.tol:g}")
    print("PASS")
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def _scenario_help() -> str:
    d = ScenarioConfig()
    return "scenario keys (defaults): " + ", ".join(f"{k}={v!r}" for k, v in d.to_dict().items())


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="cpmoe", description="Congestion prediction with a mixture of graph experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset", epilog=_scenario_help(), formatter_class=fmt)
    g.add_argument("--scenario", help="flat key = value scenario file (defaults when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="overrides the scenario seed")
    g.set_defaults(func=cmd_generate)

    keys = "run config keys (defaults):\n" + describe_keys()
    t = sub.add_parser("train", help="train a model", epilog=keys, formatter_class=fmt)
    t.add_argument("--config", help="run config file (defaults when omitted)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--variant", help="ablation variant, overrides the config")
    t.add_argument("--corrupt", help="training-split corruption mode:p:seed")
    t.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    t.add_argument("--threads", type=int, help="torch threads; 1 is bitwise reproducible")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint or a baseline", epilog=keys, formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint path, ct-baseline or ha-baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", required=True, help="metrics CSV")
    e.add_argument("--config", help="window settings for baselines")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("predict", help="write per-link predictions for origin(s)")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--at", required=True, help="origin index, comma list, lo:hi, or a split name")
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_predict)

    rp = sub.add_parser("report", help="expert-weight interpretability artifacts")
    rp.add_argument("--preds", required=True, help="CSV written by predict")
    rp.add_argument("--labels", required=True, help="dataset directory with the true levels")
    rp.add_argument("--out", required=True, help="output directory")
    rp.add_argument("--t-p", type=int, default=12, dest="t_p", help="recent window length")
    rp.add_argument("--threshold", type=float, default=0.5)
    rp.add_argument("--bins", type=int, default=10)
    rp.set_defaults(func=cmd_report)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the training loss", epilog=keys,
                        formatter_class=fmt)
    gc.add_argument("--config", help="run config file")
    gc.add_argument("--data", required=True)
    gc.add_argument("--samples", type=int, default=1, help="instances in the checked batch")
    gc.add_argument("--coords", type=int, default=32, help="sampled coordinates per tensor")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--threads", type=int, default=1)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GradCheckFailed as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADCHECK
    except (ConfigError, DatasetFormatError, InsufficientHistory, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from cpmoe.baselines import CurrentTimeBaseline
from cpmoe.cli import EXIT_GRADCHECK, EXIT_INVALID, EXIT_OK, main
from cpmoe.config import RunConfig
from cpmoe.data import load_dataset
from cpmoe.estimator import evaluate_on

SCENARIO = "n_links = 5\ntopology = 'chain'\ndays = 9\nseed = 3\n"
CONFIG = """[data]
t_p = 4
t_f = 4
n_days = 1
n_weeks = 1
[model]
d_hidden = 8
d_embed = 4
n_layers = 1
n_up = 2
n_down = 2
n_global = 1
top_k = 3
khop = 2
[training]
max_epochs = 1
patience = 1
steps_per_epoch = 3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scenario.toml").write_text(SCENARIO)
    (root / "run.toml").write_text(CONFIG)
    assert main(["generate", "--scenario", str(root / "scenario.toml"), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(root / "run.toml"), "--data", str(root / "data"),
                 "--out", str(root / "m.ckpt")]) == EXIT_OK
    return root


def test_generate_is_deterministic(workspace, tmp_path):
    assert main(["generate", "--scenario", str(workspace / "scenario.toml"), "--out", str(tmp_path / "d")]) == 0
    for f in sorted((workspace / "data").iterdir()):
        assert (tmp_path / "d" / f.name).read_bytes() == f.read_bytes()
    assert main(["generate", "--scenario", str(workspace / "scenario.toml"), "--seed", "4",
                 "--out", str(tmp_path / "e")]) == 0
    a = (workspace / "data" / "features.csv")
    if a.exists():
        assert (tmp_path / "e" / "features.csv").read_bytes() != a.read_bytes()


def test_train_outputs(workspace):
    log = pd.read_csv(workspace / "m.ckpt.log.csv")
    assert list(log["step"]) == [1, 2, 3]
    cfg = RunConfig.from_file(workspace / "m.ckpt.config.toml")
    assert cfg.d_hidden == 8 and cfg.steps_per_epoch == 3


def test_evaluate_model_and_baseline(workspace, capsys):
    out = workspace / "eval.csv"
    assert main(["evaluate", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(out)]) == 0
    row = pd.read_csv(out).iloc[0]
    assert 0 <= row["c_f1"] <= 1 and row["split"] == "test"
    assert main(["evaluate", "--ckpt", "ct-baseline", "--data", str(workspace / "data"),
                 "--config", str(workspace / "run.toml"), "--out", str(out)]) == 0
    row = pd.read_csv(out).iloc[0]
    net, feats = load_dataset(workspace / "data")
    ds = RunConfig.from_file(workspace / "run.toml").dataset(net, feats)
    ref = evaluate_on(ds, ds.test_origins, CurrentTimeBaseline().fit(ds).predict(ds))
    assert row["c_f1"] == pytest.approx(ref.c_f1, abs=1e-12)
    assert row["accuracy"] == pytest.approx(ref.accuracy, abs=1e-12)


def test_predict_and_report(workspace):
    net, feats = load_dataset(workspace / "data")
    ds = RunConfig.from_file(workspace / "run.toml").dataset(net, feats)
    t = int(ds.test_origins[0])
    preds = workspace / "p.csv"
    assert main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--at", str(t), "--out", str(preds)]) == 0
    df = pd.read_csv(preds)
    assert len(df) == ds.t_f * ds.n_links
    assert np.allclose(df[["w_per", "w_tr", "w_m"]].sum(1), 1.0, atol=1e-6)
    assert (df[["logit0", "logit1", "logit2"]].to_numpy().argmax(1) == df["level"]).all()
    assert sorted(df["step"].unique()) == list(range(1, ds.t_f + 1))

    assert main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--at", "test", "--out", str(preds)]) == 0
    out = workspace / "report"
    assert main(["report", "--preds", str(preds), "--labels", str(workspace / "data"),
                 "--out", str(out), "--t-p", "4"]) == 0
    hist = pd.read_csv(out / "weight_histogram.csv")
    n = len(pd.read_csv(preds))
    assert (hist[["w_per", "w_tr", "w_m"]].sum() == n).all()
    summary = json.loads((out / "summary.json").read_text())
    assert sum(summary["fraction"].values()) == pytest.approx(1.0)
    for name in ("dominant_rows.csv", "dominant_samples.json", "group_metrics.csv"):
        assert (out / name).exists()


def test_report_all_periodic(workspace, tmp_path):
    df = pd.DataFrame({"t": 300, "link_id": np.arange(5), "step": 1, "level": 0,
                       "w_per": 1.0, "w_tr": 0.0, "w_m": 0.0})
    df.to_csv(tmp_path / "p.csv", index=False)
    assert main(["report", "--preds", str(tmp_path / "p.csv"), "--labels", str(workspace / "data"),
                 "--out", str(tmp_path / "r"), "--t-p", "4"]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["fraction"]["periodic"] == 1.0


def test_gradcheck_command(workspace, tmp_path, capsys):
    cfg = tmp_path / "g.toml"
    cfg.write_text(CONFIG.replace("top_k = 3", "top_k = 5") + "lambda_imp = 0.0\nlambda_load = 0.0\n")
    assert main(["gradcheck", "--config", str(cfg), "--data", str(workspace / "data"), "--coords", "4"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--config", str(cfg), "--data", str(workspace / "data"), "--coords", "4",
                 "--tol", "0"]) == EXIT_GRADCHECK


def test_error_exit_codes(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert main(["train", "--config", str(bad), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert "nonsense" in capsys.readouterr().err
    assert main(["evaluate", "--ckpt", str(tmp_path / "absent"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o.csv")]) == EXIT_INVALID
    assert main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--at", "0", "--out", str(tmp_path / "o.csv")]) == EXIT_INVALID
    assert main(["predict", "--ckpt", str(workspace / "m.ckpt"), "--data", str(workspace / "data"),
                 "--at", "abc", "--out", str(tmp_path / "o.csv")]) == EXIT_INVALID
    assert main(["generate", "--out", str(tmp_path / "g"), "--scenario", str(bad)]) == EXIT_INVALID


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cpmoe.cli", "train", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "lambda_imp" in res.stdout

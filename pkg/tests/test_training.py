import csv

import numpy as np
import pytest
import torch

import cpmoe.training as training
from cpmoe.estimator import CPMoEClassifier
from cpmoe.training import LOG_COLUMNS, Normalizer, TrainConfig, TrainingDiverged, batch_tensors


def _fit(ds, tiny_params, **kw):
    params = {**tiny_params, "max_epochs": 1, "patience": 1, **kw}
    return CPMoEClassifier(**params).fit(ds)


def test_zero_lr_keeps_parameters(small_dataset, tiny_params):
    est = CPMoEClassifier(**tiny_params).initialize(small_dataset)
    before = {k: v.clone() for k, v in est.model_.state_dict().items()}
    fitted = _fit(small_dataset, tiny_params, lr=0.0, steps_per_epoch=3)
    after = fitted.model_.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_first_losses_deterministic(small_dataset, tiny_params):
    a = _fit(small_dataset, tiny_params, steps_per_epoch=10, seed=5).result_.losses()
    b = _fit(small_dataset, tiny_params, steps_per_epoch=10, seed=5).result_.losses()
    c = _fit(small_dataset, tiny_params, steps_per_epoch=10, seed=6).result_.losses()
    assert len(a) == 10 and a == b
    assert a != c


def test_loss_decreases(small_dataset, tiny_params):
    curves = []
    for seed in range(3):
        est = _fit(small_dataset, tiny_params, max_epochs=5, patience=5, seed=seed, lr=3e-3)
        rows = est.result_.log
        curves.append([np.mean([r["loss"] for r in rows if r["epoch"] == e]) for e in range(1, 6)])
    med = np.median(np.array(curves), axis=0)
    assert med[-1] < med[0]


def test_log_file(small_dataset, tiny_params, tmp_path):
    est = _fit(small_dataset, tiny_params, max_epochs=2, patience=2, steps_per_epoch=2)
    est.result_.write_log(tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [r["step"] for r in rows] == ["1", "2", "3", "4"]
    assert rows[0]["val_cf1"] == "" and rows[1]["val_cf1"] != ""
    assert est.result_.epochs_run == 2 and est.result_.best_epoch in (1, 2)


def test_early_stopping(small_dataset, tiny_params):
    # a zero learning rate never improves after the first epoch
    est = _fit(small_dataset, tiny_params, lr=0.0, max_epochs=10, patience=2, steps_per_epoch=1)
    assert est.result_.epochs_run == 3 and est.result_.best_epoch == 1


def test_divergence_aborts(small_dataset, tiny_params, monkeypatch):
    real = training.total_loss

    def nan_loss(*args, **kw):
        loss, parts = real(*args, **kw)
        return loss * float("nan"), parts

    monkeypatch.setattr(training, "total_loss", nan_loss)
    with pytest.raises(TrainingDiverged):
        _fit(small_dataset, tiny_params)


def test_config_validation():
    for bad in (dict(patience=0), dict(batch_size=0), dict(steps_per_epoch=0), dict(lr=-1.0), dict(lambda_imp=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_normalizer(small_dataset):
    norm = Normalizer.fit(small_dataset)
    lo, hi = small_dataset.train_period()
    X = norm(small_dataset.inputs("train")[lo:hi]).reshape(-1, 2)
    assert np.allclose(X.mean(0), 0, atol=1e-9) and np.allclose(X.std(0), 1, atol=1e-9)
    b = batch_tensors(small_dataset.batch(small_dataset.train_origins[:2], "train"), norm, torch.float64)
    assert b["recent"].dtype == torch.float64 and b["labels"].dtype == torch.int64
    assert b["label_mask"].dtype == torch.bool

import numpy as np
import pytest
from sklearn.base import clone

from cpmoe.baselines import (CurrentTimeBaseline, HistoricalAverageBaseline, baseline_current_time,
                             baseline_historical_average, slot_mode_table)
from cpmoe.data import FeatureTensor, TrafficDataset
from cpmoe.metrics import evaluate

from conftest import chain_network


def _features(levels):
    levels = np.asarray(levels, dtype=float)
    speed = 60.0 - 15.0 * levels
    return FeatureTensor(np.stack([speed, levels], -1), np.ones(levels.shape, dtype=bool), interval_minutes=60)


def test_current_time_broadcast():
    recent = np.array([[[0, 1], [2, 0], [1, 2]]])  # [B=1, T_p=3, N=2]
    out = baseline_current_time(recent, 4)
    assert out.shape == (1, 4, 2)
    assert (out == np.array([1, 2])).all()


def test_mode_table_and_ties():
    levels = np.array([[0], [0], [0], [2], [0], [0], [2], [2]])
    slots = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    table = slot_mode_table(levels, slots, 3)
    assert table[:, 0].tolist() == [0, 2, 0]  # slot 2 is unseen
    masked = np.array([[-1], [2], [-1], [1], [1], [-1]])
    assert slot_mode_table(masked, np.zeros(6, int), 1)[0, 0] == 1
    assert baseline_historical_average(table, np.array([[1, 0]])).shape == (1, 2, 1)


def test_constant_series_is_perfect():
    feats = _features(np.full((24 * 12, 3), 2))
    ds = TrafficDataset(chain_network(3), feats, t_p=3, t_f=3, n_days=1, n_weeks=0)
    for est in (CurrentTimeBaseline(), HistoricalAverageBaseline()):
        pred = est.fit(ds).predict(ds)
        o = ds.test_origins
        y = feats.levels[o[:, None] + np.arange(1, 4)[None]]
        assert evaluate(y, pred).accuracy == 1.0


def test_periodic_series_ha_exact():
    day = np.array([0] * 8 + [2] * 4 + [1] * 4 + [0] * 8)
    feats = _features(np.tile(day, 10)[:, None].repeat(2, 1))
    ds = TrafficDataset(chain_network(2), feats, t_p=3, t_f=4, n_days=1, n_weeks=0)
    ha = HistoricalAverageBaseline().fit(ds)
    o = ds.test_origins
    y = feats.levels[o[:, None] + np.arange(1, 5)[None]]
    assert evaluate(y, ha.predict(ds)).accuracy == 1.0
    assert evaluate(y, CurrentTimeBaseline().fit(ds).predict(ds)).accuracy < 1.0


def test_alternating_series_brute_force():
    lv = np.tile([0, 2], 24 * 4)[:, None]
    feats = _features(lv)
    ds = TrafficDataset(chain_network(1), feats, t_p=2, t_f=3, n_days=1, n_weeks=0)
    pred = CurrentTimeBaseline().fit(ds).predict(ds, split="all")
    hits = total = 0
    for t in ds.origins:
        for h in range(1, 4):
            hits += int(lv[t, 0] == lv[t + h, 0])
            total += 1
    y = feats.levels[ds.origins[:, None] + np.arange(1, 4)[None]]
    assert evaluate(y, pred).accuracy == pytest.approx(hits / total)


def test_estimator_api(small_dataset):
    ct = clone(CurrentTimeBaseline()).fit(small_dataset)
    pred = ct.predict(small_dataset, origins=small_dataset.val_origins[:3], split="val")
    assert pred.shape == (3, small_dataset.t_f, small_dataset.n_links)
    with pytest.raises(TypeError):
        CurrentTimeBaseline().fit(np.zeros(3))
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        HistoricalAverageBaseline().predict(small_dataset)

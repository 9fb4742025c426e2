import numpy as np
import pytest
import torch
from sklearn.base import clone

from cpmoe.data import TrafficDataset
from cpmoe.estimator import CPMoEClassifier
from cpmoe.nncore import CheckpointError, load_checkpoint, save_checkpoint

from conftest import chain_network


@pytest.fixture(scope="module")
def fitted(small_dataset):
    params = dict(d_hidden=8, d_embed=4, n_layers=1, n_up=2, n_down=2, n_global=1, top_k=3,
                  khop=2, batch_size=8, threads=1, max_epochs=1, patience=1, steps_per_epoch=4)
    return CPMoEClassifier(**params).fit(small_dataset)


def test_params_and_clone(tiny_params):
    est = CPMoEClassifier(**tiny_params)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(variant="WoC").variant == "WoC"
    with pytest.raises(ValueError):
        CPMoEClassifier(variant="nope")._check_params()


def test_predict_shapes(fitted, small_dataset):
    o = small_dataset.test_origins[:5]
    logits = fitted.predict_logits(small_dataset, o)
    assert logits.shape == (5, small_dataset.t_f, small_dataset.n_links, 3)
    proba = fitted.predict_proba(small_dataset, o)
    assert np.allclose(proba.sum(-1), 1.0)
    assert np.array_equal(fitted.predict(small_dataset, o), logits.argmax(-1))
    assert 0.0 <= fitted.score(small_dataset) <= 1.0


def test_inference_repeatable(fitted, small_dataset):
    a = fitted.predict_logits(small_dataset)
    b = fitted.predict_logits(small_dataset)
    assert np.array_equal(a, b)


def test_save_load_round_trip(fitted, small_dataset, tmp_path):
    path = tmp_path / "m.ckpt"
    fitted.save(path, extra={"note": "x"})
    back = CPMoEClassifier.load(path, small_dataset)
    assert back.checkpoint_meta_["note"] == "x"
    assert back.get_params() == fitted.get_params()
    assert np.array_equal(back.predict_logits(small_dataset), fitted.predict_logits(small_dataset))


def test_load_rejects_mismatch(fitted, small_dataset, small_scenario, tmp_path):
    path = tmp_path / "m.ckpt"
    fitted.save(path)
    tensors, meta = load_checkpoint(path)
    name = next(iter(tensors))
    tensors[name] = torch.zeros(tuple(tensors[name].shape) + (2,))
    save_checkpoint(tmp_path / "bad.ckpt", tensors, meta)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        CPMoEClassifier.load(tmp_path / "bad.ckpt", small_dataset)
    del tensors[name]
    save_checkpoint(tmp_path / "missing.ckpt", tensors, meta)
    with pytest.raises(CheckpointError, match="differ"):
        CPMoEClassifier.load(tmp_path / "missing.ckpt", small_dataset)
    _, feats = small_scenario
    from cpmoe.data import FeatureTensor
    other = TrafficDataset(chain_network(3), FeatureTensor(feats.values[:, :3], feats.mask[:, :3]),
                           t_p=4, t_f=4, n_days=1, n_weeks=1)
    with pytest.raises(CheckpointError, match="links"):
        CPMoEClassifier.load(path, other)
    save_checkpoint(tmp_path / "foreign.ckpt", {}, {"kind": "other"})
    with pytest.raises(CheckpointError):
        CPMoEClassifier.load(tmp_path / "foreign.ckpt", small_dataset)


def test_variant_structure(small_dataset, tiny_params):
    woc = CPMoEClassifier(**tiny_params, variant="WoC").initialize(small_dataset)
    names = [n for n, _ in woc.model_.named_parameters()]
    assert not any(n.startswith(("trend", "periodic", "conf_")) for n in names)
    out = woc.forward_details(small_dataset, small_dataset.test_origins[:2])
    assert torch.equal(out.logits, out.p_m) and torch.all(out.w_m == 1)


def test_wa_is_mean(small_dataset, tiny_params):
    est = CPMoEClassifier(**tiny_params, variant="WA", dtype="float64").initialize(small_dataset)
    out = est.forward_details(small_dataset, small_dataset.test_origins[:3])
    mean = (out.p_per + out.p_tr + out.p_m) / 3
    assert (out.logits - mean).abs().max().item() <= 1e-9


def test_wor_uses_one_hot(tiny_params):
    cfg = CPMoEClassifier(**tiny_params, variant="WoR").train_config()
    assert cfg.phi_steps is None
    assert CPMoEClassifier(**tiny_params).train_config().phi_steps == (1.0, 2.0)


def test_input_validation(fitted, small_dataset):
    with pytest.raises(TypeError):
        fitted.predict(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        fitted.predict(small_dataset, origins=[])
    from cpmoe.data import InsufficientHistory
    with pytest.raises(InsufficientHistory):
        fitted.predict(small_dataset, origins=[0])
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        CPMoEClassifier().predict(small_dataset)

import pytest

from cpmoe.estimator import CPMoEClassifier
from cpmoe.metrics import METRIC_COLUMNS
from cpmoe.model import VARIANTS
from cpmoe.robustness import ablation_variants, robustness_suite, summarize, variant_factory


def test_factories(tiny_params):
    base = CPMoEClassifier(**tiny_params)
    fac = ablation_variants(base)
    assert set(fac) == set(VARIANTS)
    est = fac["WoPL"](7)
    assert est.variant == "WoPL" and est.seed == 7 and est.d_hidden == tiny_params["d_hidden"]
    assert base.variant == "full"
    assert variant_factory(dict(tiny_params), "WA")(0).variant == "WA"
    with pytest.raises(ValueError):
        variant_factory(base, "bogus")


def test_suite_table(small_dataset, tiny_params):
    params = {**tiny_params, "max_epochs": 1, "patience": 1, "steps_per_epoch": 2}
    fac = variant_factory(params, "full")
    table = robustness_suite(small_dataset, fac, p_grid=(0, 60), modes=("flip",), seeds=(0, 1))
    assert list(table.columns) == ["mode", "p", "seed", *METRIC_COLUMNS]
    assert len(table) == 4
    assert table["c_f1"].between(0, 1).all()
    summ = summarize(table)
    assert len(summ) == 2
    with pytest.raises(ValueError):
        robustness_suite(small_dataset, fac, p_grid=())
    with pytest.raises(ValueError):
        robustness_suite(small_dataset, fac, modes=("shuffle",))

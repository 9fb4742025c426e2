import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cpmoe.citpe import (ConfidenceScore, PeriodicExpert, TrendExpert, cascade, dispersion, dwt,
                         extract_trend, idwt, wavedec, waverec)
from cpmoe.magl import EmbeddingBank

D = torch.float64
R2 = math.sqrt(2)


class TestWavelet:
    def test_constant(self):
        a, d = dwt(np.ones(4))
        assert np.allclose(a, [R2, R2]) and np.allclose(d, 0)

    def test_hand_example(self):
        a, d = dwt(np.array([4.0, 2.0, 6.0, 0.0]))
        assert np.allclose(a, [4.242641, 4.242641], atol=1e-6)
        assert np.allclose(d, [1.414214, 4.242641], atol=1e-6)

    def test_pair(self):
        a, d = dwt(np.array([2.5, 2.5]))
        assert np.allclose(a, [2.5 * R2]) and np.allclose(d, [0.0])

    def test_round_trip_and_detail_zeroing(self):
        x = np.array([4.0, 2.0, 6.0, 0.0])
        a, d = dwt(x)
        assert np.max(np.abs(idwt(a, d) - x)) <= 1e-12
        assert np.max(np.abs(idwt(a, np.zeros_like(d)) - 3.0)) <= 1e-12
        assert np.array_equal(idwt(np.zeros(2), np.zeros(2)), np.zeros(4))

    def test_errors(self):
        with pytest.raises(ValueError):
            dwt(np.array([]))
        with pytest.raises(ValueError):
            dwt(np.ones(3))
        with pytest.raises(ValueError):
            idwt(np.ones(2), np.ones(3))

    def test_torch_matches_numpy(self):
        x = np.random.default_rng(0).normal(size=(3, 12))
        a, d = dwt(torch.from_numpy(x))
        an, dn = dwt(x)
        assert np.allclose(a.numpy(), an) and np.allclose(d.numpy(), dn)

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_multilevel_round_trip(self, levels, mult, seed):
        x = np.random.default_rng(seed).normal(size=mult * 2 ** levels)
        assert np.max(np.abs(waverec(wavedec(x, levels)) - x)) <= 1e-9

    @given(st.integers(1, 30), st.integers(1, 3), st.integers(0, 10_000))
    @settings(max_examples=60, deadline=None)
    def test_any_length_round_trip(self, n, levels, seed):
        x = np.random.default_rng(seed).normal(size=n)
        assert np.max(np.abs(waverec(wavedec(x, levels)) - x)) <= 1e-9


class TestTrend:
    def test_constant(self):
        x = np.full((12, 3, 2), 1.7)
        assert np.allclose(extract_trend(x, 2, axis=0), x, atol=1e-12)

    def test_one_level(self):
        assert np.allclose(extract_trend(np.array([2.0, 0.0, 2.0, 0.0]), 1), [1, 1, 1, 1])
        ramp = np.arange(1.0, 13.0)
        assert np.allclose(extract_trend(ramp, 1), np.repeat(np.arange(1.5, 12.0, 2.0), 2))

    def test_odd_level_length(self):
        # 12 -> 6 -> 3: the level-2 split pads the length-3 approximation
        r = extract_trend(np.arange(12.0), 2)
        assert r.shape == (12,)
        assert np.allclose(r[:4], r[0])

    @given(arrays(np.float64, 12, elements=st.floats(-100, 100)))
    @settings(max_examples=100, deadline=None)
    def test_idempotent(self, x):
        r = extract_trend(x, 2)
        assert np.max(np.abs(extract_trend(r, 2) - r)) <= 1e-9

    def test_axis_handling(self):
        x = torch.randn(2, 12, 3, 2, dtype=D)
        r = extract_trend(x, 2, axis=1)
        manual = extract_trend(x[0, :, 1, 0].numpy(), 2)
        assert np.allclose(r[0, :, 1, 0].numpy(), manual)


class TestExperts:
    def test_trend_shapes_and_zero_head(self):
        ex = TrendExpert(2, 8, 12, 12).double()
        x = torch.randn(3, 12, 5, 2, dtype=D)
        assert ex(x).shape == (3, 12, 5, 3)
        assert ex.msa.heads == 2
        with torch.no_grad():
            ex.head.layers[-1].weight.zero_()
            ex.head.layers[-1].bias.zero_()
        assert torch.equal(ex(x), torch.zeros(3, 12, 5, 3, dtype=D))

    def test_periodic_shapes_and_zero_head(self):
        ex = PeriodicExpert(2, 8, 4, 84, 12).double()
        emb = EmbeddingBank(5, 4).double()
        hist = torch.randn(2, 84, 5, 2, dtype=D)
        tod = torch.randint(0, 288, (2, 84))
        dow = torch.randint(0, 7, (2, 84))
        assert ex(hist, tod, dow, emb).shape == (2, 12, 5, 3)
        with torch.no_grad():
            ex.head.layers[-1].weight.zero_()
            ex.head.layers[-1].bias.zero_()
        assert torch.equal(ex(hist, tod, dow, emb), torch.zeros(2, 12, 5, 3, dtype=D))

    def test_periodic_uses_shared_embeddings(self):
        ex = PeriodicExpert(2, 8, 4, 6, 2).double()
        emb = EmbeddingBank(3, 4).double()
        hist = torch.randn(1, 6, 3, 2, dtype=D)
        tod, dow = torch.zeros(1, 6, dtype=torch.long), torch.zeros(1, 6, dtype=torch.long)
        base = ex(hist, tod, dow, emb)
        with torch.no_grad():
            emb.E_tod[0] += 1.0
        assert not torch.equal(base, ex(hist, tod, dow, emb))


class TestDispersion:
    def test_examples(self):
        assert dispersion(torch.zeros(3, dtype=D)).tolist() == pytest.approx([0.0, -math.log(3)], abs=1e-12)
        assert dispersion(torch.full((3,), 4.2, dtype=D)).tolist() == pytest.approx([0.0, -1.098612], abs=1e-6)
        v, ne = dispersion(torch.tensor([10.0, 0.0, 0.0], dtype=D)).tolist()
        assert v == pytest.approx(200 / 9, abs=1e-4) and ne == pytest.approx(-0.000998, abs=1e-6)

    @given(arrays(np.float64, 3, elements=st.floats(-20, 20)), st.floats(-50, 50))
    @settings(max_examples=100, deadline=None)
    def test_shift_invariance(self, x, c):
        a = dispersion(torch.from_numpy(x))
        b = dispersion(torch.from_numpy(x + c))
        assert abs(a[1] - b[1]) <= 1e-9 and abs(a[0] - b[0]) <= 1e-7


class TestConfidence:
    def test_range(self):
        s = ConfidenceScore().double()
        w = s(torch.randn(4, 6, 5, 3, dtype=D) * 5)
        assert w.shape == (4, 6, 5) and ((w > 0) & (w < 1)).all()

    def test_limits(self):
        s = ConfidenceScore().double()
        last = s.mlp.layers[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.fill_(0.0)
        assert torch.equal(s(torch.randn(2, 3, dtype=D)), torch.full((2,), 0.5, dtype=D))
        with torch.no_grad():
            last.bias.fill_(-1e4)
        assert torch.equal(s(torch.randn(2, 3, dtype=D)), torch.zeros(2, dtype=D))


class TestCascade:
    def _vecs(self):
        return (torch.tensor([1.0, 0, 0], dtype=D), torch.tensor([0, 1.0, 0], dtype=D),
                torch.tensor([0, 0, 1.0], dtype=D))

    def test_worked_example(self):
        out = cascade(*self._vecs(), torch.tensor(0.5, dtype=D), torch.tensor(0.5, dtype=D))
        assert out.logits.tolist() == [0.5, 0.25, 0.25]

    def test_degenerate(self):
        per, tr, m = self._vecs()
        assert torch.equal(cascade(per, tr, m, torch.tensor(1.0, dtype=D), torch.tensor(0.3, dtype=D)).logits, per)
        assert torch.equal(cascade(per, tr, m, torch.tensor(0.0, dtype=D), torch.tensor(0.0, dtype=D)).logits, m)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cascade(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(3, 3), torch.zeros(2), torch.zeros(2))

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_weights_and_convex_hull(self, seed):
        g = torch.Generator().manual_seed(seed)
        p = [torch.randn(4, 5, 3, generator=g, dtype=D) for _ in range(3)]
        c1, c2 = torch.rand(4, 5, generator=g, dtype=D), torch.rand(4, 5, generator=g, dtype=D)
        out = cascade(*p, c1, c2)
        total = out.w_per + out.w_tr + out.w_m
        assert torch.allclose(total, torch.ones_like(total), atol=1e-12)
        stack = torch.stack(p)
        assert (out.logits <= stack.max(0).values + 1e-12).all() and (out.logits >= stack.min(0).values - 1e-12).all()
        recon = out.w_per[..., None] * p[0] + out.w_tr[..., None] * p[1] + out.w_m[..., None] * p[2]
        assert torch.allclose(recon, out.logits, atol=1e-12)

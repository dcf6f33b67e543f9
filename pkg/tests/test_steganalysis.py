import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import norm
from sklearn.metrics import roc_auc_score

from causalve.errors import ValidationError
from causalve.metrics import psnr
from causalve.steganalysis import (FUSION_THRESHOLD, chi_square, fusion_score, lsb4_hide,
                                   lsb4_recover, roc, steg_detectors, to_uint8)
from causalve.synthetic import natural_clip


class TestLsb:
    def test_hand_example(self):
        stego = lsb4_hide(np.array([181], np.uint8), np.array([214], np.uint8))
        assert stego[0] == 189 == 0b10111101
        assert lsb4_recover(stego)[0] == 208 == 0b11010000

    def test_secret_equals_cover(self):
        c = np.arange(256, dtype=np.uint8)
        assert np.array_equal(lsb4_recover(lsb4_hide(c, c)), c & 0xF0)

    def test_exhaustive_nibbles(self):
        c, s = np.meshgrid(np.arange(256, dtype=np.uint8), np.arange(256, dtype=np.uint8))
        stego = lsb4_hide(c, s)
        assert np.array_equal(stego >> 4, c >> 4)
        assert np.array_equal(lsb4_recover(stego), s & 0xF0)

    def test_keyed_round_trip(self):
        c, s = np.meshgrid(np.arange(256, dtype=np.uint8), np.arange(256, dtype=np.uint8))
        assert np.array_equal(lsb4_recover(lsb4_hide(c, s, key=7), key=7), s & 0xF0)
        assert not np.array_equal(lsb4_recover(lsb4_hide(c, s, key=7), key=8), s & 0xF0)

    def test_tensor_path(self):
        a = torch.from_numpy(np.arange(256, dtype=np.float32).reshape(16, 16) / 255)
        out = lsb4_recover(lsb4_hide(a, a.flip(0)))
        assert isinstance(out, torch.Tensor)
        assert np.array_equal(to_uint8(out), to_uint8(a.flip(0)) & 0xF0)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            lsb4_hide(np.zeros((4, 4), np.uint8), np.zeros((4, 5), np.uint8))

    def test_corpus_psnr_band(self):
        clips = [natural_clip(s, 4).frames for s in range(12)]
        vals = [psnr(clips[i], lsb4_hide(clips[i], clips[(i + 1) % 12])) for i in range(12)]
        assert 31 <= np.mean(vals) <= 34


class TestDetectors:
    def test_uniform_random_is_flat(self):
        u = np.random.default_rng(0).integers(0, 256, (64, 64), dtype=np.uint8)
        assert chi_square(u) > 0.5
        assert steg_detectors(u).flagged()

    def test_constant_frame(self):
        rep = steg_detectors(np.full((16, 16), 77, np.uint8))
        assert rep.degenerate and rep.fusion == 0.0

    def test_features_layout(self):
        rep = steg_detectors(to_uint8(natural_clip(0, 1).frames[0]))
        assert rep.features.shape == (4,)
        assert 0 <= rep.fusion <= 1

    def test_corpus_rates(self):
        frames = [to_uint8(f) for s in range(10) for f in natural_clip(s, 2, size=(64, 64)).frames]
        cover = np.array([fusion_score(f) for f in frames])
        stego = np.array([fusion_score(lsb4_hide(f, frames[(j + 1) % len(frames)], key=j))
                          for j, f in enumerate(frames)])
        assert np.mean(cover < FUSION_THRESHOLD) >= 0.9
        assert np.mean(stego > FUSION_THRESHOLD) >= 0.9


class TestRoc:
    def test_separated(self):
        assert roc([2, 3, 4], [0, 1]).auc == 1.0
        assert roc([0, 1], [2, 3, 4]).auc == 0.0

    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        assert abs(roc(rng.normal(size=4000), rng.normal(size=4000)).auc - 0.5) < 0.03

    def test_binormal(self):
        rng = np.random.default_rng(1)
        pos, neg = rng.normal(1, 1, 5000), rng.normal(0, 1, 5000)
        assert norm.cdf(1 / math.sqrt(2)) == pytest.approx(0.760, abs=1e-3)
        assert roc(pos, neg).auc == pytest.approx(norm.cdf(1 / math.sqrt(2)), abs=0.015)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=1, max_size=30),
           st.lists(st.integers(0, 20), min_size=1, max_size=30))
    def test_sklearn_oracle_with_ties(self, pos, neg):
        y = [1] * len(pos) + [0] * len(neg)
        assert roc(pos, neg).auc == pytest.approx(roc_auc_score(y, pos + neg), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=20),
           st.lists(st.integers(-50, 50), min_size=1, max_size=20))
    def test_monotone_invariance(self, pos, neg):
        pos, neg = np.array(pos) / 10, np.array(neg) / 10
        a = roc(pos, neg)
        b = roc(np.exp(pos), np.exp(neg))
        assert a.auc == pytest.approx(b.auc, abs=1e-12)
        assert np.all(np.diff(a.fpr) >= 0) and np.all(np.diff(a.tpr) >= 0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            roc([], [1.0])

    def test_outputs(self, tmp_path):
        curve = roc([0.9, 0.8, 0.3], [0.1, 0.4])
        curve.write_csv(tmp_path / "roc.csv")
        curve.plot(tmp_path / "roc.png")
        assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr")
        assert (tmp_path / "roc.png").stat().st_size > 0

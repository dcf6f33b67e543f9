import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from causalve.errors import ValidationError
from causalve.wavelet import (band_pack, band_unpack, dwt2, group_frames, idwt2, pack_bands,
                              pack_clip, unpack_bands, unpack_clip)


def haar_oracle(x: np.ndarray):
    """Loop-by-block evaluation of the 2x2 Haar formulas on one [C, H, W] frame."""
    c, h, w = x.shape
    out = np.zeros((4, c, h // 2, w // 2))
    for ch in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                a, b = x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1]
                cc, d = x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1]
                out[:, ch, i, j] = [(a + b + cc + d) / 2, (a + b - cc - d) / 2,
                                    (a - b + cc - d) / 2, (a - b - cc + d) / 2]
    return out


def test_hand_block():
    ll, hl, lh, hh = dwt2(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert [float(v) for v in (ll, hl, lh, hh)] == [5.0, -2.0, -1.0, 0.0]


def test_constant_frame():
    ll, hl, lh, hh = dwt2(torch.full((3, 8, 8), 0.3, dtype=torch.float64))
    assert torch.allclose(ll, torch.full_like(ll, 0.6))
    for band in (hl, lh, hh):
        assert torch.equal(band, torch.zeros_like(band))


def test_matches_oracle():
    x = np.random.default_rng(0).random((3, 16, 16))
    got = torch.stack(dwt2(torch.from_numpy(x))).numpy()
    assert np.allclose(got, haar_oracle(x), atol=1e-12)


def test_energy_and_reconstruction():
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    bands = dwt2(x)
    energy = sum(float((b ** 2).sum()) for b in bands)
    assert abs(energy - float((x ** 2).sum())) <= 1e-5 * float((x ** 2).sum())
    assert float((idwt2(*bands) - x).abs().max()) <= 1e-6


def test_inverse_examples():
    z = torch.zeros(3, 4, 4)
    assert torch.equal(idwt2(z, z, z, z), torch.zeros(3, 8, 8))
    assert torch.allclose(idwt2(torch.full((1, 4, 4), 0.8), z[:1], z[:1], z[:1]),
                          torch.full((1, 8, 8), 0.4))


def test_errors():
    with pytest.raises(ValidationError):
        dwt2(torch.zeros(3, 7, 8))
    with pytest.raises(ValidationError):
        idwt2(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), torch.zeros(1, 4, 4), torch.zeros(1, 2, 4))
    with pytest.raises(ValidationError):
        band_pack([torch.zeros(3, 8, 8), torch.zeros(3, 8, 10)])
    with pytest.raises(ValidationError):
        band_unpack(torch.zeros(35, 4, 4), 3, 3)
    with pytest.raises(ValidationError):
        band_pack([])


def test_pack_shapes_and_layout():
    frames = [torch.rand(3, 16, 16) for _ in range(3)]
    assert band_pack(frames[:1]).shape == (12, 8, 8)
    stack = band_pack(frames)
    assert stack.shape == (36, 8, 8)
    for g, f in enumerate(frames):
        ll = dwt2(f)[0]
        assert torch.equal(stack[3 * g:3 * g + 3], ll)
    hh_last = dwt2(frames[2])[3]
    assert torch.equal(stack[33:36], hh_last)


def test_pack_bands_is_exact_bijection():
    bands = torch.randn(4, 3, 3, 8, 8)
    assert torch.equal(unpack_bands(pack_bands(bands), 3, 3), bands)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 3]), st.integers(1, 6), st.integers(1, 6))
def test_round_trip_property(g, c, h2, w2):
    x = torch.rand(g, c, 2 * h2, 2 * w2, dtype=torch.float64)
    back = band_unpack(band_pack(x), g, c)
    assert float((back - x).abs().max()) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 10), st.integers(1, 4))
def test_clip_packing_with_partial_group(t, g):
    x = torch.rand(t, 3, 8, 8)
    stacks = pack_clip(x, g)
    assert stacks.shape[0] == -(-t // g)
    assert float((unpack_clip(stacks, g, 3, t) - x).abs().max()) <= 1e-6
    grouped = group_frames(x, g)
    assert torch.equal(grouped.reshape(-1, 3, 8, 8)[t:], x[-1:].expand(grouped.shape[0] * g - t, 3, 8, 8))

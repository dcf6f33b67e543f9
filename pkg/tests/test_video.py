import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from causalve.errors import FormatError, ValidationError
from causalve.video import (VideoClip, augment, load_clip, read_raw_tensor, save_clip,
                            validate_frame, write_raw_tensor)


def _clip(t=8, c=3, h=32, w=32, seed=0, audio=False):
    g = torch.Generator().manual_seed(seed)
    frames = torch.rand(t, c, h, w, generator=g)
    return VideoClip(frames, fps=25.0, audio=torch.randn(t, 16, generator=g) if audio else None)


class TestInvariants:
    def test_rejects_empty_clip(self):
        with pytest.raises(ValidationError):
            VideoClip(torch.zeros(0, 3, 32, 32))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            VideoClip(torch.full((2, 3, 8, 8), 1.5))

    def test_rejects_odd_size(self):
        with pytest.raises(ValidationError):
            validate_frame(torch.zeros(3, 7, 8))

    def test_rejects_nan(self):
        f = torch.zeros(1, 8, 8)
        f[0, 0, 0] = float("nan")
        with pytest.raises(ValidationError):
            validate_frame(f)

    def test_audio_length_must_match(self):
        with pytest.raises(ValidationError):
            VideoClip(torch.zeros(4, 3, 8, 8), audio=torch.zeros(3, 16))

    def test_bad_fps(self):
        with pytest.raises(ValidationError):
            VideoClip(torch.zeros(1, 1, 8, 8), fps=0)


class TestContainers:
    def test_png_round_trip(self, tmp_path):
        clip = _clip(audio=True)
        save_clip(clip, tmp_path / "c")
        back = load_clip(tmp_path / "c")
        assert back.shape == (8, 3, 32, 32)
        assert back.fps == 25.0
        assert float((back.frames - clip.frames).abs().max()) <= 1 / 255
        assert torch.equal(back.audio, clip.audio)

    def test_gray_png_round_trip(self, tmp_path):
        clip = _clip(t=2, c=1, h=16, w=16)
        save_clip(clip, tmp_path / "g")
        back = load_clip(tmp_path / "g")
        assert back.shape == (2, 1, 16, 16)
        assert float((back.frames - clip.frames).abs().max()) <= 1 / 255

    def test_raw_round_trip_exact(self, tmp_path):
        clip = _clip()
        save_clip(clip, tmp_path / "c.raw", fmt="raw")
        assert torch.equal(load_clip(tmp_path / "c.raw").frames, clip.frames)

    def test_raw_header_driven(self, tmp_path):
        vals = np.random.default_rng(0).random(4 * 3 * 16 * 16).astype("<f4")
        path = tmp_path / "x.raw"
        path.write_bytes(b"CVE1" + struct.pack("<4I", 4, 3, 16, 16) + vals.tobytes())
        clip = load_clip(path)
        assert clip.shape == (4, 3, 16, 16)
        assert np.array_equal(clip.frames.numpy().ravel(), vals)

    def test_raw_truncated(self, tmp_path):
        path = tmp_path / "x.raw"
        write_raw_tensor(path, torch.zeros(2, 1, 4, 4))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            read_raw_tensor(path)

    def test_missing_frame_file(self, tmp_path):
        save_clip(_clip(), tmp_path / "c")
        (tmp_path / "c" / "frame_0007.png").unlink()
        with pytest.raises(FormatError):
            load_clip(tmp_path / "c")

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "d").mkdir()
        with pytest.raises(FormatError):
            load_clip(tmp_path / "d")

    def test_shape_mismatch_in_manifest(self, tmp_path):
        save_clip(_clip(), tmp_path / "c")
        m = json.loads((tmp_path / "c" / "manifest.json").read_text())
        m["H"] = 16
        (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ValidationError):
            load_clip(tmp_path / "c")

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.sampled_from([1, 3]), st.integers(1, 8), st.integers(1, 8))
    def test_raw_round_trip_property(self, t, c, h2, w2):
        import tempfile
        from pathlib import Path
        clip = _clip(t, c, 2 * h2, 2 * w2, seed=t * 7 + c)
        with tempfile.TemporaryDirectory() as d:
            save_clip(clip, Path(d) / "c.raw", fmt="raw")
            assert torch.equal(load_clip(Path(d) / "c.raw").frames, clip.frames)


class TestAugment:
    def test_identity_crop(self):
        clip = _clip()
        assert torch.equal(augment(clip, (32, 32)).frames, clip.frames)

    def test_seeded(self):
        clip = _clip()
        a = augment(clip, (16, 16), rng_seed=5)
        b = augment(clip, (16, 16), rng_seed=5)
        assert torch.equal(a.frames, b.frames)

    def test_same_offset_across_frames(self):
        # a clip whose frames are shifted copies of one ramp: the crop must keep the shift
        base = torch.linspace(0, 1, 32)[None, :].expand(32, 32)
        frames = torch.stack([base, base * 0.5]).unsqueeze(1)
        out = augment(VideoClip(frames), (16, 16), rng_seed=3).frames
        assert torch.allclose(out[1], out[0] * 0.5)

    def test_flip_involution(self):
        clip = _clip()
        once = augment(clip, (32, 32), flip_h=True, rng_seed=1)
        twice = augment(once, (32, 32), flip_h=True, rng_seed=1)
        assert torch.equal(twice.frames, clip.frames)
        assert not torch.equal(once.frames, clip.frames)

    def test_crop_too_large(self):
        with pytest.raises(ValidationError):
            augment(_clip(), (64, 32))

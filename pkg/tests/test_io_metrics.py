"""Tensor files, frame I/O, PSNR/SSIM."""

import numpy as np
import pytest

from vidhaze.frameio import read_frame, read_frames, write_frame
from vidhaze.metrics import psnr, ssim
from vidhaze.tensorfile import load_tensor, save_tensor


class TestTensorFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(3,), (2, 4), (3, 5, 7), (1, 2, 3, 4)]:
            arr = rng.standard_normal(shape)
            p = tmp_path / "t.dvdt"
            save_tensor(p, arr)
            np.testing.assert_array_equal(load_tensor(p), arr)

    def test_magic_bytes(self, tmp_path):
        p = tmp_path / "t.dvdt"
        save_tensor(p, np.zeros((2, 2)))
        raw = p.read_bytes()
        assert raw[:4] == b"DVDT"
        assert np.frombuffer(raw[4:8], dtype="<u4")[0] == 2  # rank

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.dvdt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_tensor(p)

    def test_truncated_rejected(self, tmp_path):
        p = tmp_path / "t.dvdt"
        save_tensor(p, np.zeros((4, 4)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="bytes"):
            load_tensor(p)

    def test_nonfinite_rejected(self, tmp_path):
        p = tmp_path / "t.dvdt"
        save_tensor(p, np.array([1.0, np.inf]))
        with pytest.raises(ValueError, match="non-finite"):
            load_tensor(p)


class TestFrameIO:
    @pytest.mark.parametrize("ext", ["png", "ppm"])
    def test_roundtrip_8bit(self, tmp_path, ext):
        rng = np.random.default_rng(1)
        frame = rng.uniform(0, 1, (3, 12, 16))
        p = tmp_path / f"f.{ext}"
        write_frame(p, frame)
        back = read_frame(p)
        assert back.shape == (3, 12, 16)
        assert np.abs(back - frame).max() <= (0.5 / 255) + 1e-9

    def test_exact_at_8bit_grid(self, tmp_path):
        frame = np.round(np.random.default_rng(2).uniform(0, 1, (3, 8, 8)) * 255) / 255
        p = tmp_path / "f.png"
        write_frame(p, frame)
        np.testing.assert_allclose(read_frame(p), frame, atol=1e-12)

    def test_read_frames_sorted(self, tmp_path):
        for i in (2, 0, 1):
            write_frame(tmp_path / f"frame_{i:04d}.png", np.full((3, 8, 8), i / 4))
        frames = read_frames(tmp_path, "frame_*.png")
        means = [f.mean() for f in frames]
        assert means == sorted(means)

    def test_missing_directory_reported(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_frames(tmp_path / "nope", "*.png")

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="3,H,W"):
            write_frame(tmp_path / "f.png", np.zeros((1, 8, 8)))


class TestMetrics:
    def test_identical_frames_capped(self):
        x = np.random.default_rng(3).uniform(0, 1, (3, 16, 16))
        assert psnr(x, x.copy()) == 99.0
        assert ssim(x, x.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_known_mse(self):
        a = np.zeros((3, 10, 10))
        b = np.full((3, 10, 10), 0.1)  # mse = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_psnr_monotone_in_noise(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(0.2, 0.8, (3, 16, 16))
        vals = [psnr(x, np.clip(x + rng.normal(0, s, x.shape), 0, 1))
                for s in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]

    def test_ssim_degrades_with_structure_loss(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (3, 32, 32))
        blurred = x.mean() * np.ones_like(x)
        assert ssim(x, blurred) < 0.5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))
        with pytest.raises(ValueError, match="differ"):
            ssim(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))

"""Flow providers: block matching and file/truth plumbing."""

import numpy as np
import pytest

from vidhaze.flow import FlowProvider, block_matching_flow
from vidhaze.scenes import SceneParams, generate_dataset
from vidhaze.tensorfile import save_tensor


class TestBlockMatching:
    def test_static_scene_zero_flow(self):
        rng = np.random.default_rng(0)
        frame = rng.uniform(0, 1, (3, 32, 32))
        flow = block_matching_flow(frame, frame)
        np.testing.assert_array_equal(flow, np.zeros((2, 32, 32)))

    def test_global_translation_exact_interior(self):
        rng = np.random.default_rng(1)
        wide = rng.uniform(0, 1, (3, 32, 40))
        ref = wide[:, :, 3:35]       # ref content sits 3 px to the right
        search = wide[:, :, :32]
        flow = block_matching_flow(ref, search, smooth=0)
        interior = flow[:, 8:-8, 8:-8]
        np.testing.assert_array_equal(interior[0], np.full(interior[0].shape, 3.0))
        np.testing.assert_array_equal(interior[1], np.zeros(interior[1].shape))

    def test_epe_against_truth(self):
        """Block matching on pre-dehazed frames (its pipeline input)
        recovers the synthesized translation flow."""
        from vidhaze.haze import predehaze_dcp

        ds = generate_dataset(SceneParams(seed=2, n_hazy=6, m_clear=10, motion_px=3,
                                          max_jitter=3, object_size=0))
        pre = [predehaze_dcp(f) for f in ds.hazy]
        epes = []
        for t in range(1, 6):
            est = block_matching_flow(pre[t - 1], pre[t])
            truth = ds.flows_fw[t - 1]
            epes.append(np.sqrt(((est - truth) ** 2).sum(axis=0)).mean())
        assert np.mean(epes) < 1.5, f"mean EPE {np.mean(epes)}"

    def test_frame_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="differ"):
            block_matching_flow(np.zeros((3, 16, 16)), np.zeros((3, 16, 20)))

    def test_too_small_rejected(self):
        with pytest.raises(ValueError, match="smaller"):
            block_matching_flow(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))


class TestProvider:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            FlowProvider("spynet")

    def test_truth_requires_directory(self):
        with pytest.raises(ValueError, match="directory"):
            FlowProvider("truth")

    def test_file_roundtrip(self, tmp_path):
        fw = np.random.default_rng(3).uniform(-2, 2, (2, 16, 16))
        bw = -fw
        save_tensor(tmp_path / "fw_0003.dvdt", fw)
        save_tensor(tmp_path / "bw_0003.dvdt", bw)
        provider = FlowProvider("file", tmp_path)
        got_fw, got_bw = provider.pair_flows(3, None, None)
        np.testing.assert_allclose(got_fw, fw, atol=1e-15)
        np.testing.assert_allclose(got_bw, bw, atol=1e-15)

    def test_missing_files_reported(self, tmp_path):
        provider = FlowProvider("truth", tmp_path)
        with pytest.raises(FileNotFoundError, match="fw_0001"):
            provider.pair_flows(1, None, None)

    def test_blockmatch_provider_directions(self):
        ds = generate_dataset(SceneParams(seed=4, n_hazy=3, m_clear=6, motion_px=2,
                                          max_jitter=2, object_size=0))
        provider = FlowProvider("blockmatch")
        fw, bw = provider.pair_flows(1, ds.hazy[0], ds.hazy[1])
        assert fw.shape == (2, 64, 64) and bw.shape == (2, 64, 64)
        # opposite global translation directions
        assert np.sign(fw[0].mean()) == -np.sign(bw[0].mean()) or abs(fw[0].mean()) < 0.2

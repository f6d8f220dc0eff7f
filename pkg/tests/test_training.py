"""Training loop mechanics on very short runs."""

import json

import numpy as np
import pytest

from vidhaze.config import TrainConfig
from vidhaze.embedder import Embedder
from vidhaze.flow import FlowProvider
from vidhaze.matching import run_nrfm
from vidhaze.network import ParamSet, init_params
from vidhaze.scenes import SceneParams, generate_dataset
from vidhaze.training import (Adam, NumericalError, infer_video, moving_average,
                              prepare_train_data, train)


class MemProvider(FlowProvider):
    def __init__(self, ds):
        self.kind = "truth"
        self.flow_dir = None
        self.ds = ds

    def pair_flows(self, t, a, b):
        return self.ds.flows_fw[t - 1], self.ds.flows_bw[t - 1]


@pytest.fixture(scope="module")
def setup():
    ds = generate_dataset(SceneParams(seed=5, n_hazy=4, m_clear=7, height=32, width=32,
                                      object_size=6))
    emb = Embedder()
    matches = run_nrfm(ds.hazy, ds.clear, emb)
    data = prepare_train_data(ds.hazy, ds.clear, matches, MemProvider(ds), emb)
    return ds, data


class TestAdam:
    def test_quadratic_descent(self):
        from vidhaze.autodiff import Tensor

        params = ParamSet({"x": Tensor(np.array([5.0, -3.0]))})
        opt = Adam(params, lr=0.1)
        for _ in range(300):
            opt.step({"x": params["x"].data.copy()})
        np.testing.assert_allclose(params["x"].data, 0.0, atol=1e-3)

    def test_skips_missing_grads(self):
        from vidhaze.autodiff import Tensor

        params = ParamSet({"x": Tensor(np.ones(2)), "y": Tensor(np.ones(2))})
        opt = Adam(params, lr=0.5)
        opt.step({"x": np.ones(2), "y": None})
        assert params["x"].data[0] != 1.0
        np.testing.assert_array_equal(params["y"].data, np.ones(2))


class TestTrainLoop:
    def test_zero_iterations_checkpoint_equals_init(self, setup, tmp_path):
        _, data = setup
        cfg = TrainConfig(iterations=0, checkpoint_interval=0)
        params, hist = train(data, cfg, tmp_path)
        init = init_params(cfg.model_config(), seed=cfg.seed)
        assert not hist
        for k in init:
            np.testing.assert_array_equal(params[k].data, init[k].data)
        loaded = ParamSet.load(tmp_path / "checkpoint_final")
        assert set(loaded) == set(params)

    def test_short_run_deterministic(self, setup, tmp_path):
        _, data = setup
        cfg = TrainConfig(iterations=4, checkpoint_interval=0)
        p1, h1 = train(data, cfg, tmp_path / "a")
        p2, h2 = train(data, cfg, tmp_path / "b")
        assert [r.total for r in h1] == [r.total for r in h2]
        for k in p1:
            np.testing.assert_array_equal(p1[k].data, p2[k].data)

    def test_loss_log_schema(self, setup, tmp_path):
        _, data = setup
        cfg = TrainConfig(iterations=3, checkpoint_interval=0)
        train(data, cfg, tmp_path, log_file=tmp_path / "log.jsonl")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert set(rec) == {"step", "adv", "mfr", "align", "cr", "total"}
        assert rec["total"] == pytest.approx(
            rec["adv"] + rec["mfr"] + rec["align"] + rec["cr"], abs=1e-9)

    def test_divergence_aborts_with_checkpoint(self, setup, tmp_path):
        # cosine/tanh normalization keeps moderate blowups finite; only an
        # astronomically large step overflows float64
        _, data = setup
        cfg = TrainConfig(iterations=5, lr=1e80, checkpoint_interval=0)
        with pytest.raises(NumericalError, match="diverged"):
            train(data, cfg, tmp_path)
        assert (tmp_path / "checkpoint_last_good" / "index.json").exists()

    def test_holdout_excludes_pairs(self, setup):
        ds, _ = setup
        emb = Embedder()
        matches = run_nrfm(ds.hazy, ds.clear, emb)
        data = prepare_train_data(ds.hazy, ds.clear, matches, MemProvider(ds), emb,
                                  holdout=(2,))
        assert data.pair_ts == [1]  # pairs (1,2) and (2,3) dropped

    def test_holdout_validation(self, setup):
        ds, _ = setup
        emb = Embedder()
        matches = run_nrfm(ds.hazy, ds.clear, emb)
        with pytest.raises(ValueError, match="outside"):
            prepare_train_data(ds.hazy, ds.clear, matches, MemProvider(ds), emb,
                               holdout=(9,))


class TestInference:
    def test_identity_checkpoint_outputs_predehazed(self, setup):
        from vidhaze.haze import predehaze_dcp

        ds, _ = setup
        cfg = TrainConfig()
        params = init_params(cfg.model_config(), seed=0)
        outs = infer_video(ds.hazy, params, cfg, MemProvider(ds))
        assert len(outs) == 4
        for t, out in enumerate(outs):
            np.testing.assert_array_equal(out, predehaze_dcp(ds.hazy[t]))

    def test_single_frame_video_self_pairs(self, setup):
        ds, _ = setup
        cfg = TrainConfig()
        params = init_params(cfg.model_config(), seed=0)
        outs = infer_video(ds.hazy[:1], params, cfg, None)
        assert len(outs) == 1
        assert np.all(np.isfinite(outs[0]))


class TestMovingAverage:
    def test_values(self):
        ma = moving_average([1, 2, 3, 4], 2)
        np.testing.assert_allclose(ma, [1.5, 2.5, 3.5])

    def test_short_series(self):
        assert list(moving_average([1.0], 5)) == []

"""Loss stack: contextual-loss oracle, masks, consistency, GAN terms."""

import math

import numpy as np
import pytest

from vidhaze.autodiff import Tape, Tensor, ops
from vidhaze.embedder import Embedder
from vidhaze.losses import (LossReport, adversarial_loss, align_loss, consistency_loss,
                            contextual_loss, mfr_loss, occlusion_mask, total_loss)
from vidhaze.network import init_discriminator


def naive_contextual_loss(x, y, h=0.5, eps=1e-5):
    """Literal double-loop implementation of the set-matching loss."""
    C = x.shape[0]
    xs = x.reshape(C, -1).T  # [Nx, C]
    ys = y.reshape(C, -1).T
    Nx, Ny = len(xs), len(ys)
    d = np.zeros((Nx, Ny))
    for i in range(Nx):
        for j in range(Ny):
            a, b = xs[i], ys[j]
            na = max(np.linalg.norm(a), 1e-8)
            nb = max(np.linalg.norm(b), 1e-8)
            d[i, j] = 1.0 - float(a @ b) / (na * nb)
    dt = np.zeros_like(d)
    for i in range(Nx):
        dmin = d[i].min()
        for j in range(Ny):
            dt[i, j] = d[i, j] / (dmin + eps)
    w = np.exp((1.0 - dt) / h)
    cx = w / w.sum(axis=1, keepdims=True)
    return -math.log(cx.max(axis=0).mean())


class TestContextualLoss:
    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            rng = np.random.default_rng(seed)
            x = rng.standard_normal((4, 3, 3))
            y = rng.standard_normal((4, 3, 3))
            got = contextual_loss(Tensor(x), Tensor(y)).item()
            want = naive_contextual_loss(x, y)
            assert got == pytest.approx(want, abs=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 4, 4))
        y = rng.standard_normal((4, 4, 4))
        base = contextual_loss(Tensor(x), Tensor(y)).item()
        perm = rng.permutation(16)
        y_perm = y.reshape(4, -1)[:, perm].reshape(4, 4, 4)
        assert contextual_loss(Tensor(x), Tensor(y_perm)).item() == pytest.approx(base, abs=1e-12)
        x_perm = x.reshape(4, -1)[:, rng.permutation(16)].reshape(4, 4, 4)
        assert contextual_loss(Tensor(x_perm), Tensor(y)).item() == pytest.approx(base, abs=1e-12)

    def test_self_loss_minimal_over_comparators(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 4, 4))
        self_loss = contextual_loss(Tensor(x), Tensor(x)).item()
        for seed in range(20):
            y = np.random.default_rng(100 + seed).standard_normal((4, 4, 4))
            assert self_loss <= contextual_loss(Tensor(x), Tensor(y)).item() + 1e-12

    def test_feature_cap_subsampling(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 40, 40))  # 1600 > 1024 cap
        out = contextual_loss(Tensor(x), Tensor(x), max_features=64)
        assert np.isfinite(out.item())

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty|non-empty"):
            contextual_loss(Tensor(np.zeros((4, 0, 3))), Tensor(np.zeros((4, 3, 3))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel"):
            contextual_loss(Tensor(np.zeros((4, 3, 3))), Tensor(np.zeros((5, 3, 3))))


class TestMfrLoss:
    @pytest.fixture(scope="class")
    def emb(self):
        return Embedder(channels=(4, 4, 6, 6, 8))

    def test_duplicate_reference_doubles(self, emb):
        rng = np.random.default_rng(4)
        out = rng.uniform(0, 1, (3, 32, 32))
        ref = rng.uniform(0, 1, (3, 32, 32))
        single = mfr_loss(Tensor(out), ref, ref, emb).item()
        pyr = emb.embed(ref)
        per_level = sum(
            contextual_loss(lo, ops.stop_gradient(lr)).item()
            for lo, lr in zip(emb.embed(Tensor(out)).levels, pyr.levels)
        )
        assert single == pytest.approx(2 * per_level, rel=1e-10)

    def test_self_floor_below_noise(self, emb):
        rng = np.random.default_rng(5)
        ref = rng.uniform(0, 1, (3, 32, 32))
        noise = rng.uniform(0, 1, (3, 32, 32))
        floor = mfr_loss(Tensor(ref.copy()), ref, ref, emb).item()
        noisy = mfr_loss(Tensor(noise), ref, ref, emb).item()
        assert floor < noisy

    def test_geometry_mismatch_rejected(self, emb):
        with pytest.raises(ValueError, match="geometry"):
            mfr_loss(Tensor(np.random.rand(3, 32, 32)), np.random.rand(3, 64, 64),
                     np.random.rand(3, 64, 64), emb)


class TestAlignLoss:
    def test_identical_zero(self):
        x = np.random.default_rng(6).standard_normal((4, 5, 5))
        assert align_loss(Tensor(x.copy()), Tensor(x.copy())).item() == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(7).standard_normal((4, 5, 5))
        got = align_loss(Tensor(x + 0.5), Tensor(x)).item()
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_gradient_is_normalized_sign(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.standard_normal((2, 4, 4)) + 2.0)
        b = Tensor(np.zeros((2, 4, 4)))
        with Tape() as t:
            loss = align_loss(a, b)
        t.backward(loss)
        np.testing.assert_allclose(t.grad(a), np.sign(a.data) / a.size, atol=1e-15)


class TestOcclusionMask:
    def test_consistent_flow_all_trusted(self):
        rng = np.random.default_rng(9)
        fw = rng.uniform(-2, 2, (2, 10, 10))
        fw = np.round(fw)  # integer so the warp is exact
        mask = occlusion_mask(fw, -fw)
        # forward-backward sum is zero only where the warped lookup lands
        # on the same constant; for constant flow it is exact everywhere
        fw_const = np.ones((2, 10, 10)) * 2.0
        mask_c = occlusion_mask(fw_const, -fw_const)
        assert mask_c.shape == (1, 10, 10)
        np.testing.assert_array_equal(mask_c, np.ones((1, 10, 10)))

    def test_inconsistent_flow_rejected_pixels(self):
        fw = np.ones((2, 8, 8)) * 4.0
        bw = np.ones((2, 8, 8)) * 4.0  # same direction: |fw+bw| = 8px
        mask = occlusion_mask(fw, bw)
        assert mask.sum() == 0

    def test_matches_per_pixel_reference(self):
        rng = np.random.default_rng(10)
        from scipy.ndimage import gaussian_filter

        fw = gaussian_filter(rng.uniform(-3, 3, (2, 12, 12)), sigma=(0, 2, 2))
        bw = gaussian_filter(rng.uniform(-3, 3, (2, 12, 12)), sigma=(0, 2, 2))
        mask = occlusion_mask(fw, bw, alpha1=0.01, alpha2=0.5)
        H = W = 12
        for y in range(H):
            for x in range(W):
                xx = min(max(x + fw[0, y, x], 0), W - 1)
                yy = min(max(y + fw[1, y, x], 0), H - 1)
                x0, y0 = int(min(np.floor(xx), W - 2)), int(min(np.floor(yy), H - 2))
                fx, fy = xx - x0, yy - y0
                bw_at = ((1 - fy) * (1 - fx) * bw[:, y0, x0] + (1 - fy) * fx * bw[:, y0, x0 + 1]
                         + fy * (1 - fx) * bw[:, y0 + 1, x0] + fy * fx * bw[:, y0 + 1, x0 + 1])
                diff2 = ((fw[:, y, x] + bw_at) ** 2).sum()
                mag2 = (fw[:, y, x] ** 2).sum() + (bw_at ** 2).sum()
                want = 1.0 if diff2 < 0.01 * mag2 + 0.5 else 0.0
                assert mask[0, y, x] == want, (y, x)


class TestConsistencyLoss:
    def test_identical_zero_flow_full_mask_is_zero(self):
        x = np.random.default_rng(11).uniform(0, 1, (3, 8, 8))
        loss = consistency_loss(Tensor(x.copy()), Tensor(x.copy()),
                                Tensor(np.zeros((2, 8, 8)), requires_grad=False),
                                np.ones((1, 8, 8)))
        assert loss.item() == 0.0

    def test_exact_shift_inverse(self):
        rng = np.random.default_rng(12)
        prev = rng.uniform(0, 1, (3, 8, 8))
        cur = np.roll(prev, 1, axis=2)  # content moved right one pixel
        flow = np.zeros((2, 8, 8))
        flow[0] = 1.0
        mask = np.ones((1, 8, 8))
        mask[:, :, -1] = 0  # border column is not a true correspondence
        loss = consistency_loss(Tensor(cur), Tensor(prev),
                                Tensor(flow, requires_grad=False), mask)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_masked_hand_computation(self):
        rng = np.random.default_rng(13)
        out_t = rng.uniform(0, 1, (3, 6, 6))
        out_prev = rng.uniform(0, 1, (3, 6, 6))
        mask = (rng.uniform(size=(1, 6, 6)) < 0.5).astype(float)
        loss = consistency_loss(Tensor(out_t), Tensor(out_prev),
                                Tensor(np.zeros((2, 6, 6)), requires_grad=False), mask)
        want = (np.abs(out_t - out_prev) * mask).sum() / (3 * mask.sum())
        assert loss.item() == pytest.approx(want, abs=1e-12)

    def test_all_zero_mask_returns_zero(self, caplog):
        x = np.random.default_rng(14).uniform(0, 1, (3, 6, 6))
        with caplog.at_level("WARNING"):
            loss = consistency_loss(Tensor(x), Tensor(x),
                                    Tensor(np.zeros((2, 6, 6)), requires_grad=False),
                                    np.zeros((1, 6, 6)))
        assert loss.item() == 0.0
        assert any("mask" in r.message for r in caplog.records)


class TestAdversarialLoss:
    def test_closed_form_at_half(self):
        dparams = init_discriminator(seed=0)  # zero head -> D == 0.5
        rng = np.random.default_rng(15)
        out = Tensor(rng.uniform(0, 1, (3, 16, 16)))
        ref = Tensor(rng.uniform(0, 1, (3, 16, 16)))
        g_loss, d_loss = adversarial_loss(out, [ref], dparams)
        assert g_loss.item() == pytest.approx(math.log(2.0), abs=1e-12)
        assert d_loss.item() == pytest.approx(2 * math.log(2.0), abs=1e-12)

    def test_confident_discriminator_low_d_loss(self):
        dparams = init_discriminator(seed=0)
        out = Tensor(np.zeros((3, 16, 16)))
        ref = Tensor(np.ones((3, 16, 16)))
        # push the head so D(ref) -> 1 and D(out) -> 0 via the bias on a
        # brightness-sensitive first channel
        dparams["d0_b"].data[:] = 0.0
        g0, d0 = adversarial_loss(out, [ref], dparams)
        dparams2 = init_discriminator(seed=0)
        dparams2["d3_w"].data[:] = 0.0
        dparams2["d3_b"].data[:] = 0.0
        # direct construction: replace head output by large +/- logits
        from vidhaze import network

        probs_ref = network.discriminate(ref, dparams2)
        assert 0.45 < float(probs_ref.data.mean()) < 0.55  # sanity: neutral head

    def test_d_loss_ignores_generator_gradient(self):
        dparams = init_discriminator(seed=1)
        dparams["d3_w"].data += 0.05
        out = Tensor(np.random.default_rng(16).uniform(0, 1, (3, 16, 16)))
        ref = Tensor(np.random.default_rng(17).uniform(0, 1, (3, 16, 16)))
        with Tape() as t:
            g_loss, d_loss = adversarial_loss(out, [ref], dparams)
            total = ops.add(g_loss, ops.mul(d_loss, 0.0))
        t.backward(d_loss)
        assert t.grad(out) is None
        t.backward(total)
        assert t.grad(out) is not None


class TestTotalLoss:
    def _scalars(self, *vals):
        return [Tensor(np.array(float(v))) for v in vals]

    def test_zero_terms(self):
        total, report = total_loss(*self._scalars(0, 0, 0, 0))
        assert total.item() == 0.0
        assert report.total == 0.0

    def test_unit_weight_sum(self):
        total, report = total_loss(*self._scalars(1, 2, 3, 4))
        assert total.item() == pytest.approx(10.0, abs=1e-12)
        assert report.adv == 1.0 and report.mfr == 2.0
        assert report.total == pytest.approx(report.adv + report.mfr + report.align + report.cr,
                                             abs=1e-12)

    def test_custom_weights(self):
        total, _ = total_loss(*self._scalars(1, 2, 3, 4),
                              weights={"adv": 0.5, "cr": 2.0})
        assert total.item() == pytest.approx(0.5 + 2 + 3 + 8, abs=1e-12)

    def test_nan_term_named(self):
        terms = self._scalars(1, float("nan"), 3, 4)
        with pytest.raises(ValueError, match="mfr"):
            total_loss(*terms)

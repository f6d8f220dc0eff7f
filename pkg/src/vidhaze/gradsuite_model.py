"""Finite-difference cases for the alignment/fusion operators and losses.

Sampling coordinates are kept a safe distance from interpolation kinks
(flow fractions in [0.2, 0.45]) and L1 inputs away from zero differences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, check_gradients, check_gradients_sampled, ops
from .embedder import Embedder
from .gradsuite import FD_STEP
from . import losses, network

_SMALL_CFG = network.ModelConfig(kernel_size=3, levels=2, proj_dim=4,
                                 channels=(4, 6, 8))


def _safe_flow(rng, H, W, lo=0.2, hi=0.45):
    mag = rng.uniform(lo, hi, size=(2, H, W))
    sign = np.where(rng.uniform(size=(2, H, W)) < 0.5, -1.0, 1.0)
    return mag * sign


def _perturbed_params(cfg, seed, scale=0.02):
    params = network.init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 77)
    for v in params.values():
        v.data += scale * rng.standard_normal(v.shape)
    return params


def _case_flow_guided_attention(seed):
    rng = np.random.default_rng(seed)
    C, H, W, d = 4, 6, 6, 4
    flow = _safe_flow(rng, H, W)
    arrays = [
        rng.uniform(-1, 1, (C, H, W)),
        rng.uniform(-1, 1, (C, H, W)),
        flow,
        rng.uniform(-1, 1, (d, C, 1, 1)),
        rng.uniform(-1, 1, (d, C, 1, 1)),
        rng.uniform(-1, 1, (d, C, 1, 1)),
    ]

    def build(ts):
        out = network.flow_guided_attention(ts[0], ts[1], ts[2], ts[3], ts[4], ts[5],
                                            kernel_size=3)
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, out.shape))
        return ops.sum_(ops.mul(out, p))

    err = check_gradients_sampled(build, arrays, coords_per_input=6, step=FD_STEP, seed=seed)

    # Same check with the flow held constant, which selects the fused
    # attention fast path used during training.
    def build_const_flow(ts):
        out = network.flow_guided_attention(
            ts[0], ts[1], Tensor(flow, requires_grad=False), ts[2], ts[3], ts[4],
            kernel_size=3)
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, out.shape))
        return ops.sum_(ops.mul(out, p))

    err2 = check_gradients_sampled(build_const_flow, [arrays[0], arrays[1]] + arrays[3:],
                                   coords_per_input=6, step=FD_STEP, seed=seed)
    return max(err, err2)


def _case_fcas_offsets(seed):
    rng = np.random.default_rng(seed)
    C, H, W, d = 4, 6, 6, 4
    n_in = C + d + 2
    arrays = [
        rng.uniform(-1, 1, (C, H, W)),
        rng.uniform(-1, 1, (d, H, W)),
        _safe_flow(rng, H, W),
        rng.uniform(-0.5, 0.5, (18, n_in, 3, 3)),
        rng.uniform(-0.5, 0.5, (18, 1, 1)),
    ]

    def build(ts):
        out = network.fcas_offsets(ts[0], ts[1], ts[2], ts[3], ts[4])
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, out.shape))
        return ops.sum_(ops.mul(out, p))

    return check_gradients_sampled(build, arrays, coords_per_input=6, step=FD_STEP, seed=seed)


def _case_deformable_align(seed):
    rng = np.random.default_rng(seed)
    C, H, W = 3, 6, 6
    arrays = [
        rng.uniform(-1, 1, (C, H, W)),
        _safe_flow(rng, H, W, 0.05, 0.2).repeat(9, axis=0).reshape(18, H, W),
        _safe_flow(rng, H, W),
        rng.uniform(-1, 1, (C, C, 3, 3)),
    ]

    def build(ts):
        out = network.deformable_align(ts[0], ts[1], ts[2], ts[3])
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, out.shape))
        return ops.sum_(ops.mul(out, p))

    return check_gradients_sampled(build, arrays, coords_per_input=6, step=FD_STEP, seed=seed)


def _case_dcaf_fuse(seed):
    rng = np.random.default_rng(seed)
    params = _perturbed_params(_SMALL_CFG, seed)
    # Bias the offset predictors so deformable taps sit away from the
    # integer-grid interpolation kinks that break finite differences.
    params["dcaf_dcnoff_k_b"].data += 0.3
    params["dcaf_dcnoff_v_b"].data += 0.3
    C, H, W = 4, 8, 8
    arrays = [
        rng.uniform(-1, 1, (C, H, W)),
        rng.uniform(-1, 1, (C, H, W)),
        params["dcaf_q_w"].data,
        params["dcaf_dcn_k_w"].data,
        params["dcaf_out_w"].data,
    ]

    def build(ts):
        params["dcaf_q_w"] = ts[2]
        params["dcaf_dcn_k_w"] = ts[3]
        params["dcaf_out_w"] = ts[4]
        out = network.dcaf_fuse(ts[0], ts[1], params, _SMALL_CFG)
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, out.shape))
        return ops.sum_(ops.mul(out, p))

    return check_gradients_sampled(build, arrays, coords_per_input=5, step=FD_STEP, seed=seed)


def _case_contextual_loss(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (4, 3, 3))
    y = rng.uniform(-1, 1, (4, 3, 3))
    return check_gradients(lambda ts: losses.contextual_loss(ts[0], ts[1]), [x, y], FD_STEP)


def _case_mfr_loss(seed):
    rng = np.random.default_rng(seed)
    emb = Embedder(channels=(4, 4, 6, 6, 8))
    out = rng.uniform(0.1, 0.9, (3, 32, 32))
    ref1 = rng.uniform(0.1, 0.9, (3, 32, 32))
    ref2 = rng.uniform(0.1, 0.9, (3, 32, 32))
    p1 = emb.embed(ref1)
    p2 = emb.embed(ref2)
    return check_gradients_sampled(
        lambda ts: losses.mfr_loss(ts[0], p1, p2, emb), [out],
        coords_per_input=8, step=FD_STEP, seed=seed,
    )


def _case_align_loss(seed):
    # The current features are a detached label; only the aligned side
    # carries gradient.
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (3, 5, 5))
    b = rng.uniform(-1, 1, (3, 5, 5))
    small = np.abs(a - b) < 1e-3
    a[small] += 0.1
    return check_gradients(lambda ts: losses.align_loss(ts[0], Tensor(b)), [a], FD_STEP)


def _case_consistency_loss(seed):
    rng = np.random.default_rng(seed)
    H = W = 6
    out_t = rng.uniform(0, 1, (3, H, W))
    out_prev = rng.uniform(0, 1, (3, H, W))
    flow = _safe_flow(rng, H, W)
    mask = (rng.uniform(size=(1, H, W)) < 0.5).astype(np.float64)
    if mask.sum() == 0:
        mask[0, 0, 0] = 1.0
    return check_gradients(
        lambda ts: losses.consistency_loss(ts[0], Tensor(out_prev), Tensor(flow), mask),
        [out_t], FD_STEP,
    )


def _case_adversarial_loss(seed):
    rng = np.random.default_rng(seed)
    dparams = network.init_discriminator(seed)
    # Small head perturbation keeps probabilities away from the clamp.
    dparams["d3_w"].data += 0.02 * rng.standard_normal(dparams["d3_w"].shape)
    out = rng.uniform(0.1, 0.9, (3, 8, 8))
    ref = rng.uniform(0.1, 0.9, (3, 8, 8))
    arrays = [out, dparams["d0_w"].data, dparams["d3_w"].data]

    def build_g(ts):
        dparams["d0_w"] = ts[1]
        dparams["d3_w"] = ts[2]
        g_loss, _ = losses.adversarial_loss(ts[0], [Tensor(ref)], dparams)
        return g_loss

    def build_d(ts):
        # The generator output is detached inside the discriminator term,
        # so only discriminator parameters carry gradient here.
        dparams["d0_w"] = ts[0]
        dparams["d3_w"] = ts[1]
        _, d_loss = losses.adversarial_loss(Tensor(out), [Tensor(ref)], dparams)
        return d_loss

    err_g = check_gradients_sampled(build_g, arrays, coords_per_input=6, step=FD_STEP, seed=seed)
    err_d = check_gradients_sampled(build_d, arrays[1:], coords_per_input=6, step=FD_STEP, seed=seed)
    return max(err_g, err_d)


def _case_dehaze_step(seed):
    rng = np.random.default_rng(seed)
    params = _perturbed_params(_SMALL_CFG, seed, scale=0.01)
    H = W = 8
    arrays = [
        rng.uniform(0.2, 0.8, (3, H, W)),
        rng.uniform(0.2, 0.8, (3, H, W)),
        _safe_flow(rng, H, W),
        params["enc0_w"].data,
        params["dcn_w"].data,
        params["dec1_w"].data,
    ]

    def build(ts):
        params["enc0_w"] = ts[3]
        params["dcn_w"] = ts[4]
        params["dec1_w"] = ts[5]
        result = network.dehaze_step(ts[0], ts[1], ts[2], params, _SMALL_CFG)
        p = Tensor(np.random.default_rng(seed + 1).uniform(-1, 1, result["output"].shape))
        q = Tensor(np.random.default_rng(seed + 2).uniform(-1, 1, result["aligned"].shape))
        return ops.add(ops.sum_(ops.mul(result["output"], p)),
                       ops.sum_(ops.mul(result["aligned"], q)))

    return check_gradients_sampled(build, arrays, coords_per_input=4, step=FD_STEP, seed=seed)


MODEL_CASES = {
    "flow_guided_attention": _case_flow_guided_attention,
    "fcas_offsets": _case_fcas_offsets,
    "deformable_align": _case_deformable_align,
    "dcaf_fuse": _case_dcaf_fuse,
    "contextual_loss": _case_contextual_loss,
    "mfr_loss": _case_mfr_loss,
    "align_loss": _case_align_loss,
    "consistency_loss": _case_consistency_loss,
    "adversarial_loss": _case_adversarial_loss,
    "dehaze_step": _case_dehaze_step,
}

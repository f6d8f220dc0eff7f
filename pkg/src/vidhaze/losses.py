"""Training objective: contextual reference loss over pyramid features,
alignment L1, occlusion-masked temporal consistency, and a patch GAN.

L1 terms are mean-reduced so tolerances are resolution independent. The
total is a weighted sum with unit default weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .embedder import Embedder, FeaturePyramid
from .network import ParamSet, discriminate

log = logging.getLogger(__name__)

CX_BANDWIDTH = 0.5
CX_EPS = 1e-5
CX_MAX_FEATURES = 1024
PROB_CLAMP = 1e-6


@dataclass
class LossReport:
    adv: float
    mfr: float
    align: float
    cr: float
    total: float

    def to_dict(self, step: int) -> dict:
        return {"step": step, "adv": self.adv, "mfr": self.mfr,
                "align": self.align, "cr": self.cr, "total": self.total}


def _feature_rows(feats, max_features: int) -> Tensor:
    """Flatten [C,H,W] to [N,C] feature rows, strided down to <= max_features."""
    C = feats.shape[0]
    n = feats.shape[1] * feats.shape[2]
    rows = ops.transpose(ops.reshape(feats, (C, n)), (1, 0))
    if n > max_features:
        stride = -(-n // max_features)
        rows = ops.getitem(rows, (slice(None, None, stride), slice(None)))
    return rows


def _row_normalize(rows: Tensor) -> Tensor:
    norm = ops.sqrt(ops.sum_(ops.mul(rows, rows), axis=1, keepdims=True))
    return ops.div(rows, ops.maximum(norm, 1e-8))


def contextual_loss(x, y, bandwidth: float = CX_BANDWIDTH, eps: float = CX_EPS,
                    max_features: int = CX_MAX_FEATURES) -> Tensor:
    """Set-to-set feature loss under normalized cosine distances.

    Each y feature is softly matched to its nearest x feature; the loss is
    -log of the mean best match affinity. Invariant to spatial permutation
    of either feature set.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.ndim != 3 or y.ndim != 3:
        raise ValueError(f"contextual_loss expects [C,H,W] features, got {x.shape}, {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"channel mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.size == 0 or y.size == 0:
        raise ValueError("contextual_loss requires non-empty feature sets")
    xr = _row_normalize(_feature_rows(x, max_features))
    yr = _row_normalize(_feature_rows(y, max_features))
    dist = ops.sub(1.0, ops.matmul(xr, ops.transpose(yr, (1, 0))))   # [Nx,Ny]
    dmin = ops.reduce_min(dist, axis=1, keepdims=True)
    dnorm = ops.div(dist, ops.add(dmin, eps))
    w = ops.exp(ops.div(ops.sub(1.0, dnorm), bandwidth))
    cx = ops.div(w, ops.sum_(w, axis=1, keepdims=True))
    best = ops.reduce_max(cx, axis=0)                                 # per y feature
    return ops.neg(ops.log(ops.mean(best)))


def mfr_loss(out_frame, ref1, ref2, embedder: Embedder,
             bandwidth: float = CX_BANDWIDTH, eps: float = CX_EPS,
             max_features: int = CX_MAX_FEATURES) -> Tensor:
    """Sum of per-level contextual losses against both matched references.

    References may be frames or precomputed pyramids (cached by the trainer;
    no gradient flows into them).
    """
    pyr_out = embedder.embed(out_frame)
    total = None
    for ref in (ref1, ref2):
        pyr_ref = ref if isinstance(ref, FeaturePyramid) else embedder.embed(ops.stop_gradient(ref))
        if pyr_ref.geometry() != pyr_out.geometry():
            raise ValueError(
                f"pyramid geometry mismatch: {pyr_ref.geometry()} vs {pyr_out.geometry()}"
            )
        for lvl_out, lvl_ref in zip(pyr_out.levels, pyr_ref.levels):
            term = contextual_loss(lvl_out, ops.stop_gradient(lvl_ref),
                                   bandwidth, eps, max_features)
            total = term if total is None else ops.add(total, term)
    return total


def align_loss(F_align, F_cur) -> Tensor:
    """Mean absolute discrepancy; the current features act as a fixed label."""
    if F_align.shape != F_cur.shape:
        raise ValueError(f"align_loss shape mismatch: {F_align.shape} vs {F_cur.shape}")
    return ops.mean(ops.abs_(ops.sub(F_align, ops.stop_gradient(F_cur))))


def occlusion_mask(flow_fw: np.ndarray, flow_bw: np.ndarray,
                   alpha1: float = 0.01, alpha2: float = 0.5) -> np.ndarray:
    """Forward-backward consistency mask [1,H,W]: 1 where flow is trusted.

    Pure computation on arrays; call outside any active tape.
    """
    if flow_fw.shape != flow_bw.shape:
        raise ValueError(f"flow shapes differ: {flow_fw.shape} vs {flow_bw.shape}")
    fw = flow_fw if isinstance(flow_fw, np.ndarray) else flow_fw.data
    bw = flow_bw if isinstance(flow_bw, np.ndarray) else flow_bw.data
    bw_warped = ops.warp(Tensor(bw), Tensor(fw)).data
    diff2 = ((fw + bw_warped) ** 2).sum(axis=0)
    mag2 = (fw ** 2).sum(axis=0) + (bw_warped ** 2).sum(axis=0)
    return (diff2 < alpha1 * mag2 + alpha2).astype(np.float64)[None, :, :]


def consistency_loss(out_t, out_prev, flow_t_to_prev, mask) -> Tensor:
    """Masked L1 between the warped current output and the previous output."""
    out_t = out_t if isinstance(out_t, Tensor) else Tensor(out_t)
    out_prev = out_prev if isinstance(out_prev, Tensor) else Tensor(out_prev)
    flow = flow_t_to_prev if isinstance(flow_t_to_prev, Tensor) else Tensor(flow_t_to_prev)
    if out_t.shape != out_prev.shape:
        raise ValueError(f"frame shapes differ: {out_t.shape} vs {out_prev.shape}")
    mask_arr = mask if isinstance(mask, np.ndarray) else mask.data
    trusted = float(mask_arr.sum())
    if trusted == 0:
        log.warning("consistency_loss: occlusion mask trusts no pixels; returning 0")
        return Tensor(np.array(0.0))
    warped = ops.warp(out_t, flow)
    diff = ops.abs_(ops.sub(warped, out_prev))
    masked = ops.mul(diff, Tensor(mask_arr, requires_grad=False))
    return ops.div(ops.sum_(masked), 3.0 * trusted)


def _log_prob(p: Tensor) -> Tensor:
    return ops.log(ops.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def adversarial_loss(out, refs, dparams: ParamSet):
    """Non-saturating GAN losses: (generator term, discriminator term).

    The discriminator term sees the generator output detached, so both can
    be recorded on one tape and backpropagated separately.
    """
    out = out if isinstance(out, Tensor) else Tensor(out)
    g_loss = ops.neg(ops.mean(_log_prob(discriminate(out, dparams))))
    ref_terms = None
    for ref in refs:
        term = ops.neg(ops.mean(_log_prob(discriminate(ref, dparams))))
        ref_terms = term if ref_terms is None else ops.add(ref_terms, term)
    ref_loss = ops.div(ref_terms, float(len(refs)))
    fake = discriminate(ops.stop_gradient(out), dparams)
    fake_loss = ops.neg(ops.mean(_log_prob(ops.sub(1.0, fake))))
    return g_loss, ops.add(ref_loss, fake_loss)


def total_loss(adv: Tensor, mfr: Tensor, align: Tensor, cr: Tensor,
               weights: dict | None = None):
    """Weighted sum (unit weights by default); rejects non-finite terms.

    Returns (total Tensor for backward, LossReport of detached values).
    """
    weights = weights or {}
    terms = {"adv": adv, "mfr": mfr, "align": align, "cr": cr}
    for name, t in terms.items():
        if not np.isfinite(t.data).all():
            raise ValueError(f"loss term {name!r} is non-finite")
    total = None
    for name, t in terms.items():
        wt = ops.mul(t, float(weights.get(name, 1.0)))
        total = wt if total is None else ops.add(total, wt)
    report = LossReport(
        adv=float(adv.data), mfr=float(mfr.data), align=float(align.data),
        cr=float(cr.data), total=float(total.data),
    )
    return total, report

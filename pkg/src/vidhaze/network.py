"""Two-frame dehazing network: flow-guided cosine attention sampling,
pyramid offset prediction, deformable alignment, and deformable cosine
attention fusion, around a small residual encoder/decoder.

The decoder's final convolution is zero-initialized, so the untrained
network is the identity on the current frame; training dynamics start
from a known baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops
from .tensorfile import load_tensor, save_tensor

COS_EPS = 1e-8


@dataclass
class ModelConfig:
    kernel_size: int = 7          # attention sampling window k
    levels: int = 3               # alignment pyramid levels
    proj_dim: int = 32            # attention projection width d
    deform_kernel: int = 3        # deformable convolution kernel k_d
    channels: tuple = (16, 32, 64)
    window_shape: str = "square"  # "square" (Chebyshev) or "diamond" (L1 ball)
    query_stride: int = 1         # 2 enables quarter-count queries
    use_fcas: bool = True         # attention-guided offsets (off: flow+features only)
    use_dcaf: bool = True         # attention fusion (off: plain 1x1 fusion)

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.deform_kernel % 2 != 1:
            raise ValueError(f"deform_kernel must be odd, got {self.deform_kernel}")
        if not 1 <= self.levels <= len(self.channels):
            raise ValueError(f"levels must lie in [1, {len(self.channels)}], got {self.levels}")
        if self.window_shape not in ("square", "diamond"):
            raise ValueError(f"window_shape must be square or diamond, got {self.window_shape}")
        if self.query_stride not in (1, 2):
            raise ValueError(f"query_stride must be 1 or 2, got {self.query_stride}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["channels"] = list(self.channels)
        return d


class ParamSet(dict):
    """Named parameter tensors with directory save/load."""

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for name in sorted(self):
            fname = name.replace("/", "_") + ".dvdt"
            save_tensor(directory / fname, self[name].data)
            index[name] = {"file": fname, "shape": list(self[name].shape)}
        (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ParamSet":
        directory = Path(directory)
        index = json.loads((directory / "index.json").read_text())
        params = cls()
        for name, meta in index.items():
            arr = load_tensor(directory / meta["file"])
            if list(arr.shape) != meta["shape"]:
                raise ValueError(f"{name}: stored shape {arr.shape} != index {meta['shape']}")
            params[name] = Tensor(arr)
        return params


def _kaiming(rng, c_out, c_in, k, gain=1.4):
    std = gain / math.sqrt(c_in * k * k)
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def _identity_tap(c, k):
    w = np.zeros((c, c, k, k))
    w[np.arange(c), np.arange(c), k // 2, k // 2] = 1.0
    return w


def offset_conv_in_channels(cfg: ModelConfig, level: int) -> int:
    n = cfg.channels[level] + 2
    if cfg.use_fcas:
        n += cfg.proj_dim
    if level < cfg.levels - 1:
        n += 2 * cfg.deform_kernel ** 2
    return n


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    p = ParamSet()
    c0, c1, c2 = cfg.channels
    kd2 = 2 * cfg.deform_kernel ** 2

    p["enc0_w"] = Tensor(_kaiming(rng, c0, 3, 3))
    p["enc0_b"] = Tensor(np.zeros((c0, 1, 1)))
    p["enc1_w"] = Tensor(_kaiming(rng, c1, c0, 3))
    p["enc1_b"] = Tensor(np.zeros((c1, 1, 1)))
    p["enc2_w"] = Tensor(_kaiming(rng, c2, c1, 3))
    p["enc2_b"] = Tensor(np.zeros((c2, 1, 1)))

    for level in range(cfg.levels):
        c = cfg.channels[level]
        if cfg.use_fcas:
            for name in ("q", "k", "v"):
                p[f"attn{level}_{name}_w"] = Tensor(_kaiming(rng, cfg.proj_dim, c, 1, gain=1.0))
        n_in = offset_conv_in_channels(cfg, level)
        p[f"off{level}_w"] = Tensor(np.zeros((kd2, n_in, 3, 3)))
        p[f"off{level}_b"] = Tensor(np.zeros((kd2, 1, 1)))
    p["dcn_w"] = Tensor(_identity_tap(c0, cfg.deform_kernel)
                        + 0.05 * _kaiming(rng, c0, c0, cfg.deform_kernel))

    if cfg.use_dcaf:
        for name in ("q", "k", "v"):
            p[f"dcaf_{name}_w"] = Tensor(_kaiming(rng, c0, c0, 1, gain=1.0))
            p[f"dcaf_{name}_b"] = Tensor(np.zeros((c0, 1, 1)))
        for name in ("k", "v"):
            p[f"dcaf_dcnoff_{name}_w"] = Tensor(np.zeros((kd2, c0, 3, 3)))
            p[f"dcaf_dcnoff_{name}_b"] = Tensor(np.zeros((kd2, 1, 1)))
            p[f"dcaf_dcn_{name}_w"] = Tensor(_identity_tap(c0, cfg.deform_kernel)
                                             + 0.05 * _kaiming(rng, c0, c0, cfg.deform_kernel))
        p["dcaf_out_w"] = Tensor(np.zeros((c0, 2 * c0, 1, 1)))
        p["dcaf_out_b"] = Tensor(np.zeros((c0, 1, 1)))
    else:
        # Plain fusion initialized to pass the current-frame features through.
        w = np.zeros((c0, 2 * c0, 1, 1))
        w[np.arange(c0), c0 + np.arange(c0), 0, 0] = 1.0
        p["fuse_w"] = Tensor(w)
        p["fuse_b"] = Tensor(np.zeros((c0, 1, 1)))

    p["dec0_w"] = Tensor(_kaiming(rng, c0, c0, 3))
    p["dec0_b"] = Tensor(np.zeros((c0, 1, 1)))
    p["dec1_w"] = Tensor(np.zeros((3, c0, 3, 3)))
    p["dec1_b"] = Tensor(np.zeros((3, 1, 1)))
    return p


def init_discriminator(seed: int = 0) -> ParamSet:
    """4-layer stride-2 patch classifier; final layer zero so D starts at 0.5."""
    rng = np.random.default_rng(seed)
    p = ParamSet()
    chans = [(16, 3), (32, 16), (64, 32)]
    for i, (co, ci) in enumerate(chans):
        p[f"d{i}_w"] = Tensor(_kaiming(rng, co, ci, 3))
        p[f"d{i}_b"] = Tensor(np.zeros((co, 1, 1)))
    p["d3_w"] = Tensor(np.zeros((1, 64, 3, 3)))
    p["d3_b"] = Tensor(np.zeros((1, 1, 1)))
    return p


def _conv(x, w, b=None, stride=1, padding=1):
    out = ops.conv2d(x, w, stride=stride, padding=padding)
    return out if b is None else ops.add(out, b)


def window_offsets(k: int, shape: str = "square") -> list:
    """Integer tap offsets (ex, ey) of the sampling window, row-major order."""
    r = (k - 1) // 2
    taps = []
    for ey in range(-r, r + 1):
        for ex in range(-r, r + 1):
            if shape == "diamond" and abs(ex) + abs(ey) > r:
                continue
            taps.append((ex, ey))
    return taps


def _sample_taps(feat, flow, taps, extra_offsets=None):
    """Sample feature taps at grid + flow (+ per-tap offsets) in one pass.

    feat: [C,H,W]; flow: [2,H,W]; returns [T,C,H,W].
    """
    C, H, W = feat.shape
    T = len(taps)
    base = ops.base_grid(H, W, feat.dtype)
    tap_grids = np.stack([base + np.array([ex, ey], dtype=feat.dtype)[:, None, None]
                          for ex, ey in taps])  # [T,2,H,W]
    coords = ops.add(Tensor(tap_grids, requires_grad=False), ops.reshape(flow, (1, 2, H, W)))
    if extra_offsets is not None:
        coords = ops.add(coords, extra_offsets)
    coords_big = ops.reshape(ops.transpose(coords, (1, 0, 2, 3)), (2, T * H, W))
    sampled = ops.bilinear_sample(feat, coords_big)  # [C, T*H, W]
    return ops.transpose(ops.reshape(sampled, (C, T, H, W)), (1, 0, 2, 3))


def flow_guided_attention(F_prev, F_cur, flow, proj_q, proj_k, proj_v,
                          kernel_size: int, window_shape: str = "square",
                          query_stride: int = 1) -> Tensor:
    """Cosine attention over a flow-shifted sampling window.

    Query at p comes from the previous frame; keys/values are interpolated
    from the current frame around p' = p + flow(p). Weights are the softmax
    of cosine(Q, K)/sqrt(d) over the window taps.
    """
    if F_prev.shape != F_cur.shape:
        raise ValueError(f"feature shapes differ: {F_prev.shape} vs {F_cur.shape}")
    C, H, W = F_prev.shape
    if flow.shape != (2, H, W):
        raise ValueError(f"flow must be [2,{H},{W}], got {flow.shape}")
    d = proj_q.shape[0]
    taps = window_offsets(kernel_size, window_shape)
    T = len(taps)

    Q = ops.conv2d(F_prev, proj_q)
    KV = ops.concat([ops.conv2d(F_cur, proj_k), ops.conv2d(F_cur, proj_v)], axis=0)

    if query_stride == 2:
        sl = (slice(None), slice(0, None, 2), slice(0, None, 2))
        Q = ops.getitem(Q, sl)
        flow_s = ops.getitem(flow, sl) if isinstance(flow, Tensor) else Tensor(flow.data[sl])
        Hq, Wq = Q.shape[1], Q.shape[2]
        base = ops.base_grid(H, W, F_prev.dtype)[:, ::2, ::2]
    else:
        Hq, Wq = H, W
        flow_s = flow
        base = ops.base_grid(H, W, F_prev.dtype)

    tap_grids = np.stack([base + np.array([ex, ey], dtype=F_prev.dtype)[:, None, None]
                          for ex, ey in taps])            # [T,2,Hq,Wq]
    coords = ops.add(Tensor(tap_grids, requires_grad=False), ops.reshape(flow_s, (1, 2, Hq, Wq)))
    coords_big = ops.reshape(ops.transpose(coords, (1, 0, 2, 3)), (2, T * Hq, Wq))
    out = ops.window_cosine_attention(Q, KV, coords_big, T, eps=COS_EPS)

    if query_stride == 2:
        out = ops.resize_bilinear(out, (H, W))
    return out


def fcas_offsets(F_prev, F_attn, flow, w, b, coarser_offsets=None) -> Tensor:
    """Offsets from Conv(Cat(features, attention, flow [, coarser offsets]))."""
    parts = [F_prev]
    if F_attn is not None:
        parts.append(F_attn)
    parts.append(flow)
    if coarser_offsets is not None:
        parts.append(coarser_offsets)
    for part in parts[1:]:
        if part.shape[1:] != F_prev.shape[1:]:
            raise ValueError(
                f"spatial extents differ: {part.shape[1:]} vs {F_prev.shape[1:]}"
            )
    return _conv(ops.concat(parts, axis=0), w, b, padding=1)


def deformable_align(F_prev, offsets, flow, weight) -> Tensor:
    """Deformable convolution whose taps ride the flow plus learned offsets."""
    C, H, W = F_prev.shape
    C_out, C_in, kd, kd2 = weight.shape
    if kd != kd2 or kd % 2 != 1:
        raise ValueError(f"deformable kernel must be square odd, got {weight.shape[2:]}")
    if C_in != C:
        raise ValueError(f"deformable weight expects {C_in} channels, features have {C}")
    T = kd * kd
    if offsets.shape != (2 * T, H, W):
        raise ValueError(f"offsets must be [{2 * T},{H},{W}], got {offsets.shape}")
    taps = [(b - kd // 2, a - kd // 2) for a in range(kd) for b in range(kd)]
    off_r = ops.reshape(offsets, (T, 2, H, W))
    if flow is None:
        flow = Tensor(np.zeros((2, H, W)), requires_grad=False)
    sampled = _sample_taps(F_prev, flow, taps, extra_offsets=off_r)   # [T,C,H,W]
    samp2 = ops.reshape(sampled, (T * C, H * W))
    w2 = ops.reshape(ops.transpose(weight, (0, 2, 3, 1)), (C_out, T * C))
    return ops.reshape(ops.matmul(w2, samp2), (C_out, H, W))


def scale_flow(flow, out_hw) -> Tensor:
    """Resample a flow field to a pyramid level, rescaling displacement units."""
    H, W = flow.shape[1], flow.shape[2]
    Ho, Wo = out_hw
    if (H, W) == (Ho, Wo):
        return flow
    resized = ops.resize_bilinear(flow, out_hw)
    factors = np.array([Wo / W, Ho / H]).reshape(2, 1, 1)
    return ops.mul(resized, Tensor(factors, requires_grad=False))


def gpcas_pyramid(prev_levels, cur_levels, flow, params: ParamSet, cfg: ModelConfig):
    """Coarse-to-fine offsets; the finest level emits the aligned features.

    Offsets predicted at level l are upsampled x2, doubled, and concatenated
    into level l-1's offset prediction. Only full resolution is aligned.
    """
    L = cfg.levels
    if len(prev_levels) < L or len(cur_levels) < L:
        raise ValueError(f"need {L} pyramid levels, got {len(prev_levels)}")
    coarser = None
    offsets = None
    for level in range(L - 1, -1, -1):
        Fp, Fc = prev_levels[level], cur_levels[level]
        H_l, W_l = Fp.shape[1], Fp.shape[2]
        flow_l = scale_flow(flow, (H_l, W_l))
        attn = None
        if cfg.use_fcas:
            attn = flow_guided_attention(
                Fp, Fc, flow_l,
                params[f"attn{level}_q_w"], params[f"attn{level}_k_w"], params[f"attn{level}_v_w"],
                cfg.kernel_size, cfg.window_shape, cfg.query_stride,
            )
        offsets = fcas_offsets(
            Fp, attn, flow_l, params[f"off{level}_w"], params[f"off{level}_b"],
            coarser_offsets=coarser,
        )
        if level > 0:
            up_hw = (prev_levels[level - 1].shape[1], prev_levels[level - 1].shape[2])
            coarser = ops.mul(ops.resize_bilinear(offsets, up_hw), 2.0)
    flow0 = scale_flow(flow, (prev_levels[0].shape[1], prev_levels[0].shape[2]))
    return deformable_align(prev_levels[0], offsets, flow0, params["dcn_w"]), offsets


def _global_cosine_attention(q_map, k_map, v_map) -> Tensor:
    """Every-query-to-every-key cosine attention over flattened maps."""
    C, h, w = q_map.shape
    n = h * w
    Qf = ops.transpose(ops.reshape(q_map, (C, n)), (1, 0))
    Kf = ops.transpose(ops.reshape(k_map, (C, n)), (1, 0))
    Vf = ops.transpose(ops.reshape(v_map, (C, n)), (1, 0))
    qn = ops.div(Qf, ops.maximum(ops.sqrt(ops.sum_(ops.mul(Qf, Qf), axis=1, keepdims=True)), COS_EPS))
    kn = ops.div(Kf, ops.maximum(ops.sqrt(ops.sum_(ops.mul(Kf, Kf), axis=1, keepdims=True)), COS_EPS))
    sim = ops.div(ops.matmul(qn, ops.transpose(kn, (1, 0))), math.sqrt(C))
    attn = ops.softmax(sim, axis=1)
    out = ops.matmul(attn, Vf)
    return ops.reshape(ops.transpose(out, (1, 0)), (C, h, w))


def dcaf_fuse(F_align, F_cur, params: ParamSet, cfg: ModelConfig) -> Tensor:
    """Fuse aligned and current features by cosine attention over pooled,
    deformably resampled keys/values; residual 1x1 combination at the end."""
    if F_align.shape != F_cur.shape:
        raise ValueError(f"fusion inputs differ: {F_align.shape} vs {F_cur.shape}")
    H, W = F_align.shape[1], F_align.shape[2]
    q = ops.maxpool2d(_conv(F_align, params["dcaf_q_w"], params["dcaf_q_b"], padding=0), k=4, stride=4)
    k = ops.maxpool2d(_conv(F_cur, params["dcaf_k_w"], params["dcaf_k_b"], padding=0), k=4, stride=4)
    v = ops.maxpool2d(_conv(F_cur, params["dcaf_v_w"], params["dcaf_v_b"], padding=0), k=4, stride=4)
    k_off = _conv(k, params["dcaf_dcnoff_k_w"], params["dcaf_dcnoff_k_b"], padding=1)
    v_off = _conv(v, params["dcaf_dcnoff_v_w"], params["dcaf_dcnoff_v_b"], padding=1)
    k_t = deformable_align(k, k_off, None, params["dcaf_dcn_k_w"])
    v_t = deformable_align(v, v_off, None, params["dcaf_dcn_v_w"])
    pooled = _global_cosine_attention(q, k_t, v_t)
    up = ops.resize_bilinear(pooled, (H, W))
    res = _conv(ops.concat([up, F_cur], axis=0), params["dcaf_out_w"], params["dcaf_out_b"], padding=0)
    return ops.add(F_cur, res)


def encode(frame, params: ParamSet):
    f0 = ops.leaky_relu(_conv(frame, params["enc0_w"], params["enc0_b"]))
    f1 = ops.leaky_relu(_conv(f0, params["enc1_w"], params["enc1_b"], stride=2))
    f2 = ops.leaky_relu(_conv(f1, params["enc2_w"], params["enc2_b"], stride=2))
    return [f0, f1, f2]


def decode(features, params: ParamSet) -> Tensor:
    h = ops.leaky_relu(_conv(features, params["dec0_w"], params["dec0_b"]))
    return _conv(h, params["dec1_w"], params["dec1_b"])


def dehaze_step(J_prev, J_cur, flow, params: ParamSet, cfg: ModelConfig,
                J_out_prev=None, clip_output: bool = True) -> dict:
    """Dehaze the current frame given the previous (pre-dehazed) frame.

    ``J_out_prev`` is the previous *output* frame; it is not consumed by the
    forward pass, only carried through for the temporal consistency loss.
    Returns output, aligned features, and current level-0 features.
    """
    if flow is None:
        raise ValueError("dehaze_step requires a flow field (provider contract)")
    J_prev = J_prev if isinstance(J_prev, Tensor) else Tensor(J_prev)
    J_cur = J_cur if isinstance(J_cur, Tensor) else Tensor(J_cur)
    flow = flow if isinstance(flow, Tensor) else Tensor(flow)
    prev_levels = encode(J_prev, params)
    cur_levels = encode(J_cur, params)
    F_align, offsets = gpcas_pyramid(prev_levels, cur_levels, flow, params, cfg)
    if cfg.use_dcaf:
        fused = dcaf_fuse(F_align, cur_levels[0], params, cfg)
    else:
        fused = _conv(ops.concat([F_align, cur_levels[0]], axis=0),
                      params["fuse_w"], params["fuse_b"], padding=0)
    residual = decode(fused, params)
    out = ops.add(J_cur, residual)
    if clip_output:
        out = ops.clip(out, 0.0, 1.0)
    return {
        "output": out,
        "aligned": F_align,
        "current": cur_levels[0],
        "offsets": offsets,
        "prev_output": J_out_prev,
    }


def discriminate(frame, dparams: ParamSet) -> Tensor:
    """Patch classifier probabilities in (0,1), one per 8x8 patch."""
    x = frame if isinstance(frame, Tensor) else Tensor(frame)
    for i in range(3):
        x = ops.leaky_relu(_conv(x, dparams[f"d{i}_w"], dparams[f"d{i}_b"], stride=2))
    logits = _conv(x, dparams["d3_w"], dparams["d3_b"], stride=1)
    return ops.mul(ops.add(ops.tanh(ops.mul(logits, 0.5)), 1.0), 0.5)

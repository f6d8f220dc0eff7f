"""Synthetic driving scenes: a traveling crop over a textured world strip,
a road-ramp depth map, and a monotone temporal warp with spatial jitter.

The generator knows the true correspondence (warp, jitter), so it can emit
exact match tables and constant translation flow fields for every adjacent
hazy pair. These are the oracles the matcher and aligner are scored with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .haze import MisalignmentSpec, SceneSpec, make_misaligned_pair


@dataclass
class SceneParams:
    n_hazy: int = 8
    m_clear: int = 12
    height: int = 64
    width: int = 64
    beta: float = 1.0
    airlight: float = 0.85
    motion_px: int = 3
    max_jitter: int = 4
    object_size: int = 10
    depth_near: float = 0.15
    depth_far: float = 2.0
    seed: int = 0

    @property
    def jitter_x_max(self) -> int:
        """Lateral jitter stays a fraction of the travel step so temporal
        identity is recoverable; vertical jitter uses the full budget."""
        return min(self.max_jitter, self.motion_px // 6)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SynthResult:
    hazy: list
    clear: list
    gt: list
    truth: object
    flows_fw: list = field(default_factory=list)
    flows_bw: list = field(default_factory=list)
    scene: Optional[SceneSpec] = None
    mis: Optional[MisalignmentSpec] = None


def road_depth(H: int, W: int, near: float, far: float) -> np.ndarray:
    """Depth ramp rising toward the top of the frame (the vanishing point)."""
    ramp = ((H - 1 - np.arange(H)) / max(H - 1, 1)) ** 1.5
    return (near + (far - near) * ramp)[:, None] * np.ones((1, W))


def build_world(rng: np.random.Generator, H: int, W_world: int,
                band_sigma: float = 10.0) -> np.ndarray:
    """Textured strip: smooth colored bands along x, blobs, sharp landmarks.

    Band color varies with a ~10 px correlation length so pooled-feature
    distance grows smoothly with horizontal offset (what matching ranks by).
    """
    steps = rng.normal(0.0, 0.1, size=(W_world, 3))
    walk = gaussian_filter(np.cumsum(steps, axis=0), sigma=(band_sigma, 0), mode="nearest")
    walk = (walk - walk.min(axis=0)) / np.maximum(walk.max(axis=0) - walk.min(axis=0), 1e-9)
    bands = 0.2 + 0.6 * walk  # [W,3]
    world = np.repeat(bands.T[:, None, :], H, axis=1)
    shade = (0.75 + 0.25 * (np.arange(H) / max(H - 1, 1)))[None, :, None]
    world = world * shade
    world += 0.12 * gaussian_filter(rng.standard_normal((3, H, W_world)), sigma=(0, 4, 4))
    for _ in range(max(W_world // 18, 4)):
        x0 = rng.integers(0, W_world - 12)
        y0 = rng.integers(0, H - 16)
        w = int(rng.integers(6, 14))
        h = int(rng.integers(8, 20))
        color = rng.uniform(0.05, 0.95, size=3)
        world[:, y0 : min(y0 + h, H), x0 : min(x0 + w, W_world)] = color[:, None, None]
    return np.clip(world, 0.0, 1.0)


def _monotone_warp(rng: np.random.Generator, N: int, M: int, start_max: int) -> np.ndarray:
    """Non-decreasing index map tracking the pace needed to end near M-1."""
    k = int(rng.integers(0, start_max + 1))
    warp = [k]
    for t in range(1, N):
        remaining = (M - 1) - k
        steps_left = N - t
        rate = min(max(remaining / steps_left, 0.0), 2.0)
        inc = int(rate) + (1 if rng.random() < rate - int(rate) else 0)
        k = min(k + inc, M - 1)
        warp.append(k)
    return np.asarray(warp, dtype=np.int64)


def _object_patch(rng: np.random.Generator, H: int, W: int, size: int, t: int, N: int):
    """Checkered square pasted only into the hazy view (semantic misalignment)."""
    cx = int(round((t + 1) / (N + 1) * (W - size - 2))) + 1
    cy = H - size - H // 6
    mask = np.zeros((H, W))
    mask[cy : cy + size, cx : cx + size] = 1.0
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    checker = ((yy // 2 + xx // 2) % 2).astype(np.float64)
    c0 = rng.uniform(0.1, 0.4, 3)
    c1 = rng.uniform(0.6, 0.9, 3)
    tex = c0[:, None, None] * checker + c1[:, None, None] * (1 - checker)
    return mask, tex


def generate_dataset(params: SceneParams) -> SynthResult:
    """Build one misaligned hazy/clear pair with truth matches and flows."""
    p = params
    if p.n_hazy > p.m_clear + 2:
        raise ValueError(f"n_hazy={p.n_hazy} exceeds m_clear+2={p.m_clear + 2}")
    rng = np.random.default_rng(p.seed)
    margin = p.max_jitter + 2
    world_w = p.width + p.motion_px * (p.m_clear - 1) + 2 * margin
    world = build_world(rng, p.height, world_w)
    depth = road_depth(p.height, p.width, p.depth_near, p.depth_far)

    clear = []
    for k in range(p.m_clear):
        ox = margin + k * p.motion_px
        clear.append(world[:, :, ox : ox + p.width].copy())
    scene = SceneSpec(
        frames=clear,
        depths=[depth] * p.m_clear,
        beta=np.full(3, p.beta),
        airlight=np.full(3, p.airlight),
    )

    start_max = min(2, max((p.m_clear - p.n_hazy) // 2, 0))
    warp = _monotone_warp(rng, p.n_hazy, p.m_clear, start_max)
    jx = p.jitter_x_max
    jitter = np.stack(
        [
            rng.integers(-jx, jx + 1, size=p.n_hazy) if jx else np.zeros(p.n_hazy, dtype=np.int64),
            rng.integers(-p.max_jitter, p.max_jitter + 1, size=p.n_hazy),
        ],
        axis=1,
    )
    masks = None
    if p.object_size > 0:
        masks = [
            _object_patch(rng, p.height, p.width, p.object_size, t, p.n_hazy)
            for t in range(p.n_hazy)
        ]
    mis = MisalignmentSpec(warp=warp, jitter=jitter, object_masks=masks)
    hazy, clear_out, truth, gt = make_misaligned_pair(scene, mis)

    # Constant translation flow between adjacent hazy frames (object ignored).
    # Jitter shifts content by (dx, dy), i.e. the view window moves by (-dx, -dy).
    flows_fw, flows_bw = [], []
    for t in range(1, p.n_hazy):
        ox_prev = p.motion_px * warp[t - 1] - jitter[t - 1, 0]
        ox_cur = p.motion_px * warp[t] - jitter[t, 0]
        oy_prev = -jitter[t - 1, 1]
        oy_cur = -jitter[t, 1]
        fw = np.zeros((2, p.height, p.width))
        fw[0] = ox_prev - ox_cur
        fw[1] = oy_prev - oy_cur
        flows_fw.append(fw)
        flows_bw.append(-fw)

    return SynthResult(
        hazy=hazy, clear=clear_out, gt=gt, truth=truth,
        flows_fw=flows_fw, flows_bw=flows_bw, scene=scene, mis=mis,
    )

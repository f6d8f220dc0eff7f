"""Atmospheric haze synthesis and the classical dark-channel pre-dehazer.

Haze formation follows I = J*t + A*(1-t) with transmission t = exp(-beta*d).
Misaligned hazy/clear pairs are built with a known temporal warp and
spatial jitter so downstream matching can be scored against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import minimum_filter

from .matching import MatchRecord, MatchTable


@dataclass
class SceneSpec:
    """A clear video with per-frame depth and scattering parameters.

    frames: list of [3,H,W] arrays in [0,1]; depths: list of [H,W] arrays
    (>= 0, arbitrary length units); beta: scattering coefficient(s) >= 0,
    scalar or per-channel; airlight: scalar or per-channel in [0,1].
    """

    frames: list
    depths: list
    beta: np.ndarray
    airlight: np.ndarray

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        self.airlight = np.atleast_1d(np.asarray(self.airlight, dtype=np.float64))
        if np.any(self.beta < 0):
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if np.any((self.airlight < 0) | (self.airlight > 1)):
            raise ValueError(f"airlight must lie in [0,1], got {self.airlight}")
        for i, d in enumerate(self.depths):
            if np.any(d < 0):
                raise ValueError(f"depth map {i} contains negative values")

    def __len__(self):
        return len(self.frames)


@dataclass
class MisalignmentSpec:
    """Known temporal warp and spatial jitter relating hazy to clear frames.

    warp[t] = true clear index k*(t), non-decreasing; jitter[t] = integer
    (dx, dy) translation of the hazy view; object_masks optionally mark
    pasted moving objects (semantic misalignment).
    """

    warp: np.ndarray
    jitter: np.ndarray
    object_masks: Optional[list] = None

    def __post_init__(self):
        self.warp = np.asarray(self.warp, dtype=np.int64)
        self.jitter = np.asarray(self.jitter, dtype=np.int64)
        if self.jitter.shape != (len(self.warp), 2):
            raise ValueError(f"jitter must be [N,2], got {self.jitter.shape}")

    def validate(self, M: int):
        if np.any(np.diff(self.warp) < 0):
            raise ValueError("temporal warp must be non-decreasing")
        if np.any((self.warp < 0) | (self.warp > M - 1)):
            raise ValueError(f"temporal warp must stay within [0, {M - 1}]")

    @classmethod
    def identity(cls, N: int) -> "MisalignmentSpec":
        return cls(np.arange(N), np.zeros((N, 2), dtype=np.int64))


def synthesize_haze(scene: SceneSpec, frame_index: int) -> np.ndarray:
    """Apply the scattering model to one clear frame; output stays in [0,1]."""
    J = scene.frames[frame_index]
    d = scene.depths[frame_index]
    return apply_scattering(J, d, scene.beta, scene.airlight)


def apply_scattering(J: np.ndarray, depth: np.ndarray, beta, airlight) -> np.ndarray:
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    airlight = np.atleast_1d(np.asarray(airlight, dtype=np.float64))
    if np.any(beta < 0):
        raise ValueError(f"beta must be >= 0, got {beta}")
    if np.any(depth < 0):
        raise ValueError("depth must be >= 0 everywhere")
    t = np.exp(-beta[:, None, None] * depth[None, :, :])
    return J * t + airlight[:, None, None] * (1.0 - t)


def translate(frame: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation with edge replication; shifts content by (dx, dy)."""
    if dx == 0 and dy == 0:
        return frame
    pads = [(0, 0)] * (frame.ndim - 2)
    py = (max(dy, 0), max(-dy, 0))
    px = (max(dx, 0), max(-dx, 0))
    padded = np.pad(frame, pads + [py, px], mode="edge")
    H, W = frame.shape[-2], frame.shape[-1]
    y0 = max(-dy, 0)
    x0 = max(-dx, 0)
    sl = (Ellipsis, slice(y0, y0 + H), slice(x0, x0 + W))
    return padded[sl]


def make_misaligned_pair(scene: SceneSpec, mis: MisalignmentSpec):
    """Build (hazy video, clear video, truth table) from a scene and warp.

    Hazy frame t is the scattering model applied to clear frame k*(t) after
    spatial jitter (and optional pasted objects). Returns a fourth element,
    the aligned ground-truth frames (jittered clear pre-haze), for scoring.
    """
    M = len(scene)
    N = len(mis.warp)
    if N > M + 2:
        raise ValueError(f"hazy video too long: N={N} exceeds M+2={M + 2}")
    mis.validate(M)
    hazy, gt = [], []
    for t in range(N):
        k = int(mis.warp[t])
        dx, dy = int(mis.jitter[t, 0]), int(mis.jitter[t, 1])
        view = translate(scene.frames[k], dx, dy)
        if mis.object_masks is not None and mis.object_masks[t] is not None:
            mask, tex = mis.object_masks[t]
            view = np.where(mask[None, :, :] > 0, tex, view)
        gt.append(view)
        hazy.append(apply_scattering(view, scene.depths[k], scene.beta, scene.airlight))
    truth = MatchTable(
        [
            MatchRecord(t=t, k=int(mis.warp[t]), k2=min(int(mis.warp[t]) + 1, M - 1), score=0.0,
                        win=(int(mis.warp[t]), int(mis.warp[t])))
            for t in range(N)
        ]
    )
    return hazy, list(scene.frames), truth, gt


# ---------------------------------------------------------------------------
# dark channel prior pre-dehazer
# ---------------------------------------------------------------------------

def dark_channel(img: np.ndarray, patch: int) -> np.ndarray:
    """Min over channels, then a patch-wise min filter (edge-replicated)."""
    return minimum_filter(img.min(axis=0), size=patch, mode="nearest")


def estimate_airlight(img: np.ndarray, dark: np.ndarray) -> np.ndarray:
    """Mean color of the brightest 0.1% dark-channel pixels."""
    H, W = dark.shape
    n = max(H * W // 1000, 1)
    idx = np.argsort(dark.ravel())[-n:]
    flat = img.reshape(3, -1)
    return flat[:, idx].mean(axis=1)


def predehaze_dcp(hazy: np.ndarray, omega: float = 0.95, patch: int = 15,
                  t_floor: float = 0.1) -> np.ndarray:
    """Dark-channel-prior haze removal on a [3,H,W] frame in [0,1]."""
    if hazy.ndim != 3 or hazy.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] frame, got {hazy.shape}")
    A = np.maximum(estimate_airlight(hazy, dark_channel(hazy, patch)), 1e-3)
    t = 1.0 - omega * dark_channel(hazy / A[:, None, None], patch)
    t = np.maximum(t, t_floor)
    J = (hazy - A[:, None, None]) / t[None, :, :] + A[:, None, None]
    return np.clip(J, 0.0, 1.0)

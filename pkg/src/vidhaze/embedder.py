"""Fixed convolutional feature pyramid used for frame matching and the
reference loss.

A deterministic, never-trained 5-stage pyramid with orthogonally
initialized stride-2 kernels stands in for a pretrained backbone; random
orthogonal projections preserve the cosine geometry that matching needs.
Per-stage weights can be swapped from tensor files without code changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops
from .tensorfile import load_tensor

WEIGHT_SEED = 0x44564431
STAGE_CHANNELS = (16, 24, 32, 48, 64)
MIN_SIZE = 32
_STD_EPS = 1e-3


@dataclass
class FeaturePyramid:
    """Five feature maps with spatial extent halving (ceil) per level."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"pyramid must have 5 levels, got {len(self.levels)}")

    def geometry(self):
        return tuple(lvl.shape for lvl in self.levels)


def _orthogonal_kernel(rng, c_out: int, c_in: int, k: int) -> np.ndarray:
    """Row-orthogonal [c_out, c_in*k*k] kernel, scaled for tanh gain."""
    n = c_in * k * k
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    return (q[:c_out] * np.sqrt(2.0)).reshape(c_out, c_in, k, k)


class Embedder:
    """Deterministic 5-stage stride-2 conv pyramid with tanh nonlinearity."""

    def __init__(self, channels=STAGE_CHANNELS, seed: int = WEIGHT_SEED):
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        self.weights = []
        c_prev = 3
        for c in self.channels:
            self.weights.append(Tensor(_orthogonal_kernel(rng, c, c_prev, 3), requires_grad=False))
            c_prev = c

    def load_stage_weights(self, paths):
        """Replace per-stage kernels from tensor files (one file per stage)."""
        weights = []
        c_prev = 3
        for c, path in zip(self.channels, paths):
            arr = load_tensor(Path(path))
            if arr.shape != (c, c_prev, 3, 3):
                raise ValueError(f"{path}: expected shape {(c, c_prev, 3, 3)}, got {arr.shape}")
            weights.append(Tensor(arr, requires_grad=False))
            c_prev = c
        self.weights = weights

    def embed(self, frame, mode: str = "content") -> FeaturePyramid:
        """Embed a [3,H,W] frame; pure function of (frame, mode, weights).

        mode "content" keeps absolute appearance (the reference-loss
        features must see brightness and contrast errors); mode "matching"
        standardizes per row, cancelling the row-affine distortion haze
        imposes on road scenes (the frame-matching features). Both share
        the same fixed kernels.
        """
        frame = frame if isinstance(frame, Tensor) else Tensor(frame)
        if frame.ndim != 3 or frame.shape[0] != 3:
            raise ValueError(f"embed expects a [3,H,W] frame, got {frame.shape}")
        if frame.shape[1] < MIN_SIZE or frame.shape[2] < MIN_SIZE:
            raise ValueError(
                f"frame too small to embed: {frame.shape[1]}x{frame.shape[2]} (minimum {MIN_SIZE})"
            )
        if mode not in ("content", "matching"):
            raise ValueError(f"unknown embed mode {mode!r}")
        x = self._preprocess(frame, per_row=(mode == "matching"))
        levels = []
        for w in self.weights:
            x = ops.tanh(ops.conv2d(x, w, stride=2, padding=1))
            levels.append(x)
        return FeaturePyramid(levels)

    @staticmethod
    def _preprocess(frame: Tensor, per_row: bool) -> Tensor:
        """Interior crop; per-row standardization in matching mode.

        The crop drops border bands where translation padding corrupts the
        statistics. Per-row standardization makes features invariant to the
        row-affine map that row-structured scattering applies; content mode
        keeps raw values so appearance errors stay visible to the loss.
        """
        H, W = frame.shape[1], frame.shape[2]
        my, mx = H // 8, W // 8
        x = ops.getitem(frame, (slice(None), slice(my, H - my), slice(mx, W - mx)))
        if not per_row:
            return x
        m = ops.mean(x, axis=2, keepdims=True)
        centered = ops.sub(x, m)
        var = ops.mean(ops.mul(centered, centered), axis=2, keepdims=True)
        return ops.div(centered, ops.sqrt(ops.add(var, _STD_EPS * _STD_EPS)))


def pooled_features(pyr: FeaturePyramid) -> list:
    """Global average pooling per level, one vector per level."""
    return [ops.mean(lvl, axis=(1, 2)) for lvl in pyr.levels]


def frame_distance(a: FeaturePyramid, b: FeaturePyramid) -> float:
    """Mean over levels of cosine distance between pooled features, in [0,2]."""
    if a.geometry() != b.geometry():
        raise ValueError(f"pyramid geometry mismatch: {a.geometry()} vs {b.geometry()}")
    total = 0.0
    for va, vb in zip(pooled_features(a), pooled_features(b)):
        total += 1.0 - ops.cosine_similarity(va, vb).item()
    return total / 5.0

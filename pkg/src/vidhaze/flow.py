"""Flow providers for adjacent hazy frames.

Conventions: for a pair (prev, cur), ``fw`` lives on the prev grid and maps
prev content into cur (warping cur by fw re-aligns it to prev); ``bw``
lives on the cur grid and maps cur content into prev (warping prev by bw
re-aligns it to cur — the field the aligner consumes).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .tensorfile import load_tensor

BLOCK = 8
RADIUS = 8
SMOOTH = 9


def block_matching_flow(ref: np.ndarray, search: np.ndarray,
                        block: int = BLOCK, radius: int = RADIUS,
                        smooth: int = SMOOTH) -> np.ndarray:
    """Integer SAD block matching of ref into search; box-smoothed [2,H,W].

    flow(p) is the displacement that takes position p in ref to its match
    in search: warp(search, flow) approximates ref.
    """
    if ref.shape != search.shape:
        raise ValueError(f"frame shapes differ: {ref.shape} vs {search.shape}")
    ref_g = ref.mean(axis=0) if ref.ndim == 3 else ref
    sea_g = search.mean(axis=0) if search.ndim == 3 else search
    H, W = ref_g.shape
    if H < block or W < block:
        raise ValueError(f"frame {H}x{W} smaller than block {block}")
    # Local-mean removal: matching must track content, not the screen-anchored
    # brightness profile residual haze leaves behind.
    ref_g = ref_g - uniform_filter(ref_g, size=block, mode="nearest")
    sea_g = sea_g - uniform_filter(sea_g, size=block, mode="nearest")
    padded = np.pad(sea_g, radius, mode="edge")

    ys = list(range(0, H - block + 1, block))
    if ys[-1] != H - block:
        ys.append(H - block)
    xs = list(range(0, W - block + 1, block))
    if xs[-1] != W - block:
        xs.append(W - block)

    best_err = np.full((len(ys), len(xs)), np.inf)
    best_d = np.zeros((2, len(ys), len(xs)))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            window = padded[radius + dy : radius + dy + H, radius + dx : radius + dx + W]
            sad = np.abs(ref_g - window)
            integral = sad.cumsum(axis=0).cumsum(axis=1)
            ipad = np.pad(integral, ((1, 0), (1, 0)))
            for i, y0 in enumerate(ys):
                for j, x0 in enumerate(xs):
                    err = (ipad[y0 + block, x0 + block] - ipad[y0, x0 + block]
                           - ipad[y0 + block, x0] + ipad[y0, x0])
                    if err < best_err[i, j] - 1e-12:
                        best_err[i, j] = err
                        best_d[0, i, j] = dx
                        best_d[1, i, j] = dy

    flow = np.zeros((2, H, W))
    for i, y0 in enumerate(ys):
        for j, x0 in enumerate(xs):
            flow[:, y0 : y0 + block, x0 : x0 + block] = best_d[:, i, j][:, None, None]
    if smooth > 1:
        flow[0] = uniform_filter(flow[0], size=smooth, mode="nearest")
        flow[1] = uniform_filter(flow[1], size=smooth, mode="nearest")
    return flow


class FlowProvider:
    """Supplies (fw, bw) flow for each adjacent hazy pair.

    kind "truth" reads synthesized flow tensors; "blockmatch" estimates
    coarse flow from the frames; "file" loads caller-specified tensors.
    """

    def __init__(self, kind: str, flow_dir=None):
        if kind not in ("truth", "blockmatch", "file"):
            raise ValueError(f"unknown flow provider kind {kind!r}")
        if kind in ("truth", "file") and flow_dir is None:
            raise ValueError(f"flow provider {kind!r} requires a flow directory")
        self.kind = kind
        self.flow_dir = Path(flow_dir) if flow_dir else None

    def pair_flows(self, pair_index: int, prev_frame: np.ndarray, cur_frame: np.ndarray):
        if self.kind == "blockmatch":
            fw = block_matching_flow(prev_frame, cur_frame)
            bw = block_matching_flow(cur_frame, prev_frame)
            return fw, bw
        fw_path = self.flow_dir / f"fw_{pair_index:04d}.dvdt"
        bw_path = self.flow_dir / f"bw_{pair_index:04d}.dvdt"
        if not fw_path.exists() or not bw_path.exists():
            raise FileNotFoundError(
                f"flow provider {self.kind!r}: missing {fw_path.name}/{bw_path.name} "
                f"under {self.flow_dir}"
            )
        fw = load_tensor(fw_path)
        bw = load_tensor(bw_path)
        for name, f in (("fw", fw), ("bw", bw)):
            if f.ndim != 3 or f.shape[0] != 2:
                raise ValueError(f"{name} flow must be [2,H,W], got {f.shape}")
        return fw, bw

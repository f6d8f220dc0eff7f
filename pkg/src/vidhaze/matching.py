"""Non-aligned reference frame matching via an adaptive sliding window.

For each hazy frame the window over the clear video slides by the motion
observed between the two previous matches (step s), opening to length
2s + 1 around the predicted position. The matched index is the cosine
argmin of pooled pyramid features inside the window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embedder import Embedder, frame_distance

WINDOW_MIN = 3
STEP_MAX = 8


@dataclass(frozen=True)
class Window:
    """Inclusive index range [start, end] into the clear video."""

    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"empty window [{self.start}, {self.end}]")

    def __len__(self):
        return self.end - self.start + 1

    def indices(self):
        return range(self.start, self.end + 1)


@dataclass
class MatchRecord:
    t: int
    k: int
    k2: int
    score: float
    win: tuple


@dataclass
class MatchTable:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, t: int) -> MatchRecord:
        return self.records[t]

    def matched_indices(self):
        return [r.k for r in self.records]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(
                    json.dumps(
                        {"t": r.t, "k": r.k, "k2": r.k2, "score": r.score, "win": list(r.win)}
                    )
                    + "\n"
                )

    @classmethod
    def from_jsonl(cls, path) -> "MatchTable":
        records = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(MatchRecord(d["t"], d["k"], d["k2"], d["score"], tuple(d["win"])))
        return cls(records)


def init_window(N: int, M: int, window_min: int = WINDOW_MIN) -> Window:
    """Initial window [0, max(ceil((M-N)/2), window_min-1)], clipped to M-1."""
    if N > M + 2:
        raise ValueError(f"hazy video too long: N={N} exceeds M+2={M + 2}")
    if N < 1 or M < 2:
        raise ValueError(f"need N >= 1 and M >= 2, got N={N}, M={M}")
    end = max(math.ceil((M - N) / 2), window_min - 1)
    return Window(0, min(end, M - 1))


def advance_window(
    prev: Window,
    k_prev: int,
    k_prev2: int,
    M: int,
    window_min: int = WINDOW_MIN,
    step_max: int = STEP_MAX,
) -> Window:
    """Slide by the clamped observed step s; open to length 2s+1 (>= minimum)."""
    s = min(max(k_prev - k_prev2, 0), step_max)
    start = min(max(prev.start + s, 0), M - 1)
    end = min(max(start + 2 * s, start + window_min - 1), M - 1)
    return Window(start, end)


class _PyramidCache:
    def __init__(self, embedder: Embedder, frames):
        self.embedder = embedder
        self.frames = frames
        self._cache: dict = {}

    def __getitem__(self, i: int):
        if i not in self._cache:
            self._cache[i] = self.embedder.embed(self.frames[i], mode="matching")
        return self._cache[i]


def match_frame(hazy_frame, clear_frames, window: Window, embedder: Optional[Embedder] = None,
                _cache: Optional[_PyramidCache] = None):
    """Cosine argmin over the window; ties break toward the smaller index."""
    embedder = embedder or Embedder()
    if window.end >= len(clear_frames):
        raise ValueError(f"window {window} exceeds clear video of length {len(clear_frames)}")
    cache = _cache if _cache is not None else _PyramidCache(embedder, clear_frames)
    hazy_pyr = embedder.embed(hazy_frame, mode="matching")
    best_k, best_score = -1, float("inf")
    for i in window.indices():
        score = frame_distance(hazy_pyr, cache[i])
        if score < best_score:
            best_k, best_score = i, score
    return best_k, best_score


def run_nrfm(
    hazy_frames,
    clear_frames,
    embedder: Optional[Embedder] = None,
    window_min: int = WINDOW_MIN,
    step_max: int = STEP_MAX,
) -> MatchTable:
    """Match every hazy frame to its nearest clear frame, sliding the window."""
    N, M = len(hazy_frames), len(clear_frames)
    embedder = embedder or Embedder()
    window = init_window(N, M, window_min)
    cache = _PyramidCache(embedder, clear_frames)
    table = MatchTable()
    ks: list[int] = []
    for t in range(N):
        try:
            if t == 1:
                # Bootstrap: only one match observed, assume forward motion.
                s = max(1, ks[0] - table[0].win[0])
                window = advance_window(window, ks[0], ks[0] - s, M, window_min, step_max)
            elif t >= 2:
                window = advance_window(window, ks[t - 1], ks[t - 2], M, window_min, step_max)
            k, score = match_frame(hazy_frames[t], clear_frames, window, embedder, cache)
        except Exception as e:
            raise type(e)(f"NRFM failed at hazy frame t={t}: {e}") from e
        ks.append(k)
        table.records.append(
            MatchRecord(t=t, k=k, k2=min(k + 1, M - 1), score=score, win=(window.start, window.end))
        )
    return table


def match_accuracy(table: MatchTable, truth: MatchTable) -> dict:
    """Exact-match rate and mean absolute index error against a truth table."""
    if len(table) != len(truth):
        raise ValueError(f"table lengths differ: {len(table)} vs {len(truth)}")
    n = len(table)
    exact = sum(1 for a, b in zip(table.records, truth.records) if a.k == b.k)
    mean_abs = sum(abs(a.k - b.k) for a, b in zip(table.records, truth.records)) / max(n, 1)
    return {"exact_rate": exact / max(n, 1), "mean_abs_error": mean_abs, "count": n}

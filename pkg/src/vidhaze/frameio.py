"""Frame I/O: 8-bit PNG (via Pillow) and binary PPM (P6).

Frames are float arrays [3,H,W] in [0,1] internally; 8-bit conversion
happens only at the file boundary.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def write_frame(path, frame: np.ndarray) -> None:
    """Write a [3,H,W] float frame; format chosen by extension (.png/.ppm)."""
    path = Path(path)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] frame, got {frame.shape}")
    hwc = to_uint8(frame).transpose(1, 2, 0)
    if path.suffix.lower() == ".ppm":
        h, w = hwc.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(hwc).tobytes())
    else:
        Image.fromarray(hwc, mode="RGB").save(path, format="PNG")


def read_frame(path) -> np.ndarray:
    """Read an image file into a [3,H,W] float frame in [0,1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        raw = path.read_bytes()
        if not raw.startswith(b"P6"):
            raise ValueError(f"{path}: not a binary PPM")
        fields: list[bytes] = []
        pos = 2
        while len(fields) < 3:
            while pos < len(raw) and raw[pos : pos + 1].isspace():
                pos += 1
            if raw[pos : pos + 1] == b"#":
                while raw[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
                continue
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            fields.append(raw[start:pos])
        pos += 1
        w, h, maxval = (int(f) for f in fields)
        if maxval != 255:
            raise ValueError(f"{path}: only 8-bit PPM supported")
        hwc = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    else:
        with Image.open(path) as img:
            hwc = np.asarray(img.convert("RGB"))
    return from_uint8(hwc.transpose(2, 0, 1))


def read_frames(directory, pattern: str = "*.png") -> list[np.ndarray]:
    paths = sorted(Path(directory).glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no frames matching {pattern} under {directory}")
    return [read_frame(p) for p in paths]

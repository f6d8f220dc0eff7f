"""Training/run configuration: JSON file plus flag overrides.

The environment variable DVD_SEED overrides the configured seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 1e-3
    d_lr: float = 1e-4
    kernel_size: int = 7
    levels: int = 3
    proj_dim: int = 32
    deform_kernel: int = 3
    channels: tuple = (16, 32, 64)
    window_shape: str = "square"
    query_stride: int = 1
    use_fcas: bool = True
    use_dcaf: bool = True
    loss_weights: dict = field(default_factory=lambda: {"adv": 1.0, "mfr": 1.0, "align": 1.0, "cr": 1.0})
    seed: int = 0
    precision: str = "f64"
    flow: str = "truth"
    holdout_frames: tuple = ()     # frame indices excluded from training pairs
    lr_decay_step: int = 400       # step scheduler: one decay late in the run
    lr_decay: float = 0.3
    log_interval: int = 1
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision}")
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr > 0")
        self.channels = tuple(self.channels)
        self.holdout_frames = tuple(self.holdout_frames)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["channels"] = list(self.channels)
        d["holdout_frames"] = list(self.holdout_frames)
        d["loss_weights"] = dict(self.loss_weights)
        return d

    def model_config(self):
        from .network import ModelConfig

        return ModelConfig(
            kernel_size=self.kernel_size,
            levels=self.levels,
            proj_dim=self.proj_dim,
            deform_kernel=self.deform_kernel,
            channels=self.channels,
            window_shape=self.window_shape,
            query_stride=self.query_stride,
            use_fcas=self.use_fcas,
            use_dcaf=self.use_dcaf,
        )


def apply_seed_override(seed: int) -> int:
    env = os.environ.get("DVD_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ValueError(f"DVD_SEED must be an integer, got {env!r}") from e
    return seed


def load_json_config(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: invalid JSON config: {e}") from e

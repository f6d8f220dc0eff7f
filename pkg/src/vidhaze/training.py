"""Toy training loop: two-frame steps over one synthetic pair, Adam updates
for generator and discriminator, JSONL loss log, periodic checkpoints.

The previous output frame feeding the consistency loss is detached (no
gradient through time); each pass over the video resets it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, Tensor, ops
from .config import TrainConfig
from .embedder import Embedder
from .flow import FlowProvider
from .haze import predehaze_dcp
from .losses import (LossReport, adversarial_loss, align_loss, consistency_loss,
                     mfr_loss, occlusion_mask, total_loss)
from .matching import MatchTable
from .network import ParamSet, dehaze_step, init_discriminator, init_params

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training diverged or produced non-finite values."""


class Adam:
    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name, g in grads.items():
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[name].data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class TrainData:
    """Everything one training run needs, precomputed."""

    predehazed: list            # DCP output per hazy frame
    ref_pyrs: dict              # clear index -> FeaturePyramid
    ref_frames: dict            # clear index -> np frame
    matches: MatchTable
    flows: dict                 # pair t -> (fw, bw)
    masks: dict                 # pair t -> occlusion map
    pair_ts: list = None        # trainable pair indices (t of pair (t-1, t))


def prepare_train_data(hazy, clear, matches: MatchTable, provider: FlowProvider,
                       embedder: Embedder, holdout=()) -> TrainData:
    """Precompute DCP frames, reference pyramids, flows, and masks.

    Pairs touching a held-out frame index are excluded from training.
    """
    n = len(hazy)
    holdout = set(holdout)
    bad = [h for h in holdout if not 0 <= h < n]
    if bad:
        raise ValueError(f"holdout frames {bad} outside video of length {n}")
    predehazed = [predehaze_dcp(f) for f in hazy]
    pair_ts = [t for t in range(1, n) if t not in holdout and (t - 1) not in holdout]
    if not pair_ts:
        raise ValueError("no trainable frame pairs remain after holdout")
    ref_pyrs, ref_frames = {}, {}
    flows, masks = {}, {}
    for t in pair_ts:
        for k in (matches[t].k, matches[t].k2):
            if k not in ref_pyrs:
                ref_pyrs[k] = embedder.embed(clear[k])
                ref_frames[k] = clear[k]
        fw, bw = provider.pair_flows(t, predehazed[t - 1], predehazed[t])
        flows[t] = (fw, bw)
        masks[t] = occlusion_mask(fw, bw)
    return TrainData(predehazed, ref_pyrs, ref_frames, matches, flows, masks, pair_ts)


def train(data: TrainData, config: TrainConfig, out_dir,
          params: Optional[ParamSet] = None,
          log_file: Optional[Path] = None) -> tuple[ParamSet, list[LossReport]]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = config.model_config()
    params = params if params is not None else init_params(cfg, seed=config.seed)
    dparams = init_discriminator(seed=config.seed + 1)
    opt_g = Adam(params, lr=config.lr)
    opt_d = Adam(dparams, lr=config.d_lr)
    embedder = Embedder()

    n = len(data.predehazed)
    if n < 2:
        raise ValueError(f"training needs at least 2 frames, got {n}")
    pair_ts = data.pair_ts if data.pair_ts else list(range(1, n))
    history: list[LossReport] = []
    log_fh = open(log_file, "w") if log_file else None
    last_good = ParamSet({k: v.copy() for k, v in params.items()})

    try:
        prev_out = None
        for step in range(1, config.iterations + 1):
            if config.lr_decay_step and step == config.lr_decay_step:
                opt_g.lr *= config.lr_decay
                opt_d.lr *= config.lr_decay
            idx = (step - 1) % len(pair_ts)
            t = pair_ts[idx]
            if idx == 0 or pair_ts[idx - 1] != t - 1:
                prev_out = None
            fw, bw = data.flows[t]
            rec = data.matches[t]
            try:
                with Tape() as tape:
                    result = dehaze_step(
                        Tensor(data.predehazed[t - 1], requires_grad=False),
                        Tensor(data.predehazed[t], requires_grad=False),
                        Tensor(bw, requires_grad=False), params, cfg,
                    )
                    out = result["output"]
                    mfr = mfr_loss(out, data.ref_pyrs[rec.k], data.ref_pyrs[rec.k2], embedder)
                    al = align_loss(result["aligned"], result["current"])
                    if prev_out is not None:
                        cr = consistency_loss(out, Tensor(prev_out, requires_grad=False),
                                              Tensor(fw, requires_grad=False), data.masks[t])
                    else:
                        cr = Tensor(np.array(0.0), requires_grad=False)
                    refs = [Tensor(data.ref_frames[rec.k], requires_grad=False)]
                    g_adv, d_loss = adversarial_loss(out, refs, dparams)
                    total, report = total_loss(g_adv, mfr, al, cr, config.loss_weights)
                tape.backward(total)
                g_grads = {name: tape.grad(p) for name, p in params.items()}
                tape.backward(d_loss)
                d_grads = {name: tape.grad(p) for name, p in dparams.items()}
            except (FloatingPointError, ValueError) as e:
                last_good.save(out_dir / "checkpoint_last_good")
                raise NumericalError(
                    f"training diverged at step {step}: {e}; "
                    f"last good checkpoint saved"
                ) from e
            opt_g.step(g_grads)
            opt_d.step(d_grads)
            prev_out = out.data.copy()
            for k, v in params.items():
                last_good[k].data[...] = v.data

            history.append(report)
            if log_fh and (step % config.log_interval == 0 or step == config.iterations):
                log_fh.write(json.dumps(report.to_dict(step)) + "\n")
                log_fh.flush()
            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                params.save(out_dir / f"checkpoint_{step:06d}")
        params.save(out_dir / "checkpoint_final")
        (out_dir / "train_meta.json").write_text(
            json.dumps({"config": config.to_dict(), "steps": config.iterations}, indent=2)
        )
    finally:
        if log_fh:
            log_fh.close()
    return params, history


def infer_video(frames, params: ParamSet, config: TrainConfig,
                provider: Optional[FlowProvider] = None) -> list[np.ndarray]:
    """Sequential two-frame inference; the first frame pairs with itself."""
    cfg = config.model_config()
    predehazed = [predehaze_dcp(f) for f in frames]
    outputs = []
    for t in range(len(frames)):
        if t == 0:
            prev = predehazed[0]
            bw = np.zeros((2,) + frames[0].shape[1:])
        else:
            prev = predehazed[t - 1]
            _, bw = provider.pair_flows(t, predehazed[t - 1], predehazed[t]) if provider \
                else (None, np.zeros((2,) + frames[0].shape[1:]))
        result = dehaze_step(Tensor(prev), Tensor(predehazed[t]), Tensor(bw), params, cfg)
        outputs.append(result["output"].data.copy())
    return outputs


def moving_average(values, window: int):
    if len(values) < window:
        return []
    kernel = np.ones(window) / window
    return np.convolve(np.asarray(values), kernel, mode="valid")

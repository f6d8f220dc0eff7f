"""End-to-end commands: synthesize datasets, run matching, train, infer,
evaluate, and gradient-check. The CLI wraps these with argument parsing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import TrainConfig
from .embedder import Embedder
from .flow import FlowProvider, block_matching_flow
from .frameio import read_frames, write_frame
from .matching import MatchTable, match_accuracy, run_nrfm
from .metrics import psnr, ssim
from .network import ParamSet
from .scenes import SceneParams, generate_dataset
from .tensorfile import save_tensor
from .training import infer_video, prepare_train_data, train

log = logging.getLogger(__name__)

FRAME_PATTERN = "frame_{:04d}.png"


def synth_dataset(params: SceneParams, out_dir) -> Path:
    """Write hazy/clear/gt frame directories, truth table, and flow fields."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(params)
    for sub, frames in (("hazy", ds.hazy), ("clear", ds.clear), ("gt", ds.gt)):
        d = out_dir / sub
        d.mkdir(exist_ok=True)
        for i, frame in enumerate(frames):
            write_frame(d / FRAME_PATTERN.format(i), frame)
    ds.truth.to_jsonl(out_dir / "truth.jsonl")
    flow_dir = out_dir / "flow"
    flow_dir.mkdir(exist_ok=True)
    for t in range(1, params.n_hazy):
        save_tensor(flow_dir / f"fw_{t:04d}.dvdt", ds.flows_fw[t - 1])
        save_tensor(flow_dir / f"bw_{t:04d}.dvdt", ds.flows_bw[t - 1])
    scene_meta = params.to_dict()
    scene_meta["warp"] = [int(k) for k in ds.mis.warp]
    scene_meta["jitter"] = [[int(a), int(b)] for a, b in ds.mis.jitter]
    (out_dir / "scene.json").write_text(json.dumps(scene_meta, indent=2, sort_keys=True))
    manifest = {
        "pairs": [
            {
                "hazy_dir": "hazy",
                "clear_dir": "clear",
                "gt_dir": "gt",
                "truth_file": "truth.jsonl",
                "flow_dir": "flow",
            }
        ],
        "pattern": "frame_*.png",
        "format": "png",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir


@dataclass
class PairData:
    root: Path
    hazy: list
    clear: list
    gt: Optional[list]
    truth: Optional[MatchTable]
    flow_dir: Optional[Path]


def load_manifest(manifest_path) -> list[PairData]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    pattern = manifest.get("pattern", "frame_*.png")
    pairs = manifest.get("pairs", [])
    if not pairs:
        raise ValueError(f"{manifest_path}: manifest lists no pairs")
    out = []
    for entry in pairs:
        hazy_dir = root / entry["hazy_dir"]
        clear_dir = root / entry["clear_dir"]
        for d in (hazy_dir, clear_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"manifest references missing directory {d}")
        hazy = read_frames(hazy_dir, pattern)
        clear = read_frames(clear_dir, pattern)
        gt = None
        if entry.get("gt_dir") and (root / entry["gt_dir"]).is_dir():
            gt = read_frames(root / entry["gt_dir"], pattern)
        truth = None
        if entry.get("truth_file") and (root / entry["truth_file"]).exists():
            truth = MatchTable.from_jsonl(root / entry["truth_file"])
        flow_dir = root / entry["flow_dir"] if entry.get("flow_dir") else None
        out.append(PairData(root, hazy, clear, gt, truth, flow_dir))
    return out


def match_command(manifest_path, out_path, unpaired: bool = False, seed: int = 0) -> dict:
    """Run the matcher per pair; report accuracy against truth when present.

    ``unpaired`` replaces matching with random reference shuffling, the
    structural no-matching baseline.
    """
    pairs = load_manifest(manifest_path)
    embedder = Embedder()
    summary = {"pairs": [], "skipped": []}
    out_path = Path(out_path)
    out_path.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        N, M = len(pair.hazy), len(pair.clear)
        if N > M + 2:
            log.warning("pair %d skipped: N=%d exceeds M+2=%d", i, N, M + 2)
            summary["skipped"].append({"pair": i, "reason": f"N={N} exceeds M+2={M + 2}"})
            continue
        if unpaired:
            rng = np.random.default_rng(seed)
            table = MatchTable()
            from .matching import MatchRecord

            for t in range(N):
                k = int(rng.integers(0, M))
                table.records.append(
                    MatchRecord(t=t, k=k, k2=min(k + 1, M - 1), score=float("nan"), win=(0, M - 1))
                )
        else:
            table = run_nrfm(pair.hazy, pair.clear, embedder)
        table_file = out_path / f"matches_{i:02d}.jsonl"
        table.to_jsonl(table_file)
        entry = {"pair": i, "file": table_file.name}
        if pair.truth is not None:
            entry.update(match_accuracy(table, pair.truth))
        summary["pairs"].append(entry)
    (out_path / "match_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def train_command(manifest_path, matches_dir, out_dir, config: TrainConfig) -> dict:
    pairs = load_manifest(manifest_path)
    pair = pairs[0]
    matches = MatchTable.from_jsonl(Path(matches_dir) / "matches_00.jsonl")
    provider = FlowProvider(config.flow, pair.flow_dir)
    embedder = Embedder()
    data = prepare_train_data(pair.hazy, pair.clear, matches, provider, embedder,
                              holdout=config.holdout_frames)
    out_dir = Path(out_dir)
    params, history = train(data, config, out_dir, log_file=out_dir / "train_log.jsonl")
    totals = [r.total for r in history]
    return {
        "steps": len(history),
        "first_total": totals[0] if totals else None,
        "last_total": totals[-1] if totals else None,
        "checkpoint": str(out_dir / "checkpoint_final"),
    }


def dehaze_command(checkpoint_dir, frames_dir, out_dir, config: TrainConfig,
                   flow_dir=None, pattern: str = "frame_*.png") -> list:
    params = ParamSet.load(checkpoint_dir)
    frames = read_frames(frames_dir, pattern)
    provider = None
    if config.flow == "blockmatch":
        provider = FlowProvider("blockmatch")
    elif flow_dir is not None:
        provider = FlowProvider(config.flow, flow_dir)
    outputs = infer_video(frames, params, config, provider)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(outputs):
        write_frame(out_dir / FRAME_PATTERN.format(i), frame)
    return outputs


def eval_command(outputs_dir, clear_dir, report_path=None, pattern: str = "frame_*.png") -> dict:
    outputs = read_frames(outputs_dir, pattern)
    clear = read_frames(clear_dir, pattern)
    if len(outputs) != len(clear):
        raise ValueError(f"frame count mismatch: {len(outputs)} outputs vs {len(clear)} references")
    per_frame = []
    for i, (o, c) in enumerate(zip(outputs, clear)):
        per_frame.append({"frame": i, "psnr": psnr(o, c), "ssim": ssim(o, c)})
    report = {
        "per_frame": per_frame,
        "mean_psnr": float(np.mean([f["psnr"] for f in per_frame])),
        "mean_ssim": float(np.mean([f["ssim"] for f in per_frame])),
    }
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def gradcheck_command(seeds: int = 20) -> dict:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(seeds=seeds)
    return {
        "tolerance": TOLERANCE,
        "results": results,
        "passed": all(v < TOLERANCE for v in results.values()),
    }


def _memory_provider(ds):
    class _P(FlowProvider):
        def __init__(self):
            self.kind = "truth"
            self.flow_dir = None

        def pair_flows(self, t, prev, cur):
            return ds.flows_fw[t - 1], ds.flows_bw[t - 1]

    return _P()


def run_toy_training(scene: SceneParams, config: TrainConfig, out_dir):
    """Synthesize, match, train, and evaluate one toy configuration.

    Returns loss history, per-frame PSNR gains over the DCP baseline, and
    the held-out mean gain.
    """
    from .embedder import Embedder
    from .haze import predehaze_dcp
    from .training import moving_average

    ds = generate_dataset(scene)
    embedder = Embedder()
    matches = run_nrfm(ds.hazy, ds.clear, embedder)
    provider = FlowProvider("blockmatch") if config.flow == "blockmatch" \
        else _memory_provider(ds)
    data = prepare_train_data(ds.hazy, ds.clear, matches, provider, embedder,
                              holdout=config.holdout_frames)
    params, history = train(data, config, out_dir)
    outputs = infer_video(ds.hazy, params, config, provider)
    gains = [psnr(outputs[t], ds.gt[t]) - psnr(predehaze_dcp(ds.hazy[t]), ds.gt[t])
             for t in range(len(ds.hazy))]
    held = list(config.holdout_frames) or list(range(len(ds.hazy)))
    totals = [r.total for r in history]
    ma = moving_average(totals, min(50, max(len(totals) // 2, 1)))
    return {
        "history": history,
        "gains": gains,
        "holdout_gain": float(np.mean([gains[t] for t in held])),
        "ma_first": float(ma[0]) if len(ma) else None,
        "ma_last": float(ma[-1]) if len(ma) else None,
        "final_align": float(np.mean([r.align for r in history[-20:]])) if history else None,
        "final_total": float(np.mean([r.total for r in history[-20:]])) if history else None,
    }


def kernel_size_sweep(out_dir, ks=(3, 5, 7, 9), iterations: int = 120,
                      seed: int = 0) -> list:
    """Short training runs across attention window sizes; comparison table.

    Mirrors the kernel-size experiment shape at toy scale; the result is
    reported, not asserted (dataset dependent).
    """
    out_dir = Path(out_dir)
    rows = []
    for k in ks:
        scene = SceneParams(seed=seed, height=32, width=32, n_hazy=6, m_clear=9,
                            object_size=6)
        cfg = TrainConfig(iterations=iterations, kernel_size=k, seed=seed,
                          holdout_frames=(4, 5), checkpoint_interval=0,
                          lr_decay_step=0)
        result = run_toy_training(scene, cfg, out_dir / f"k{k}")
        rows.append({
            "kernel_size": k,
            "final_total": result["final_total"],
            "final_align": result["final_align"],
            "holdout_gain": result["holdout_gain"],
        })
    (out_dir / "kernel_sweep.json").write_text(json.dumps(rows, indent=2))
    return rows


def ablation_comparison(out_dir, iterations: int = 120, seed: int = 0) -> list:
    """Alignment/fusion ablation at toy scale: basic, +FCAS, +FCAS+DCAF.

    Reports the final alignment loss per configuration on a scene with
    translations beyond the deformable kernel's reach.
    """
    out_dir = Path(out_dir)
    configs = [
        ("basic", dict(use_fcas=False, use_dcaf=False)),
        ("basic+fcas", dict(use_fcas=True, use_dcaf=False)),
        ("basic+fcas+dcaf", dict(use_fcas=True, use_dcaf=True)),
    ]
    rows = []
    for name, flags in configs:
        scene = SceneParams(seed=seed, height=32, width=32, n_hazy=6, m_clear=9,
                            motion_px=5, max_jitter=0, object_size=0)
        cfg = TrainConfig(iterations=iterations, seed=seed, flow="blockmatch",
                          holdout_frames=(), checkpoint_interval=0,
                          lr_decay_step=0, **flags)
        result = run_toy_training(scene, cfg, out_dir / name.replace("+", "_"))
        rows.append({"config": name, "final_align": result["final_align"],
                     "final_total": result["final_total"]})
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    return rows

"""Command line interface.

Subcommands: synth | match | train | dehaze | eval | gradcheck.
Exit codes: 0 success, 1 validation error, 2 numerical failure.
Configuration comes from an optional JSON file plus flag overrides; the
environment variable DVD_SEED overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import TrainConfig, apply_seed_override, load_json_config
from .scenes import SceneParams


def _scene_params(args) -> SceneParams:
    base = {}
    if args.config:
        base.update(load_json_config(args.config).get("scene", {}))
    for key in ("n_hazy", "m_clear", "height", "width", "beta", "airlight",
                "motion_px", "max_jitter", "object_size", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    params = SceneParams.from_dict(base)
    params.seed = apply_seed_override(params.seed)
    return params


def _train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base.update(load_json_config(args.config).get("train", {}))
    for key in ("iterations", "lr", "kernel_size", "levels", "seed", "precision", "flow"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    holdout = getattr(args, "holdout_frames", None)
    if holdout:
        base["holdout_frames"] = [int(x) for x in holdout.split(",")]
    cfg = TrainConfig.from_dict(base)
    cfg.seed = apply_seed_override(cfg.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidhaze",
                                description="Non-aligned driving-video dehazing, desk scale.")
    p.add_argument("--config", help="JSON config file with 'scene'/'train' sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a misaligned hazy/clear dataset")
    s.add_argument("out_dir")
    for key, typ in (("n_hazy", int), ("m_clear", int), ("height", int), ("width", int),
                     ("beta", float), ("airlight", float), ("motion_px", int),
                     ("max_jitter", int), ("object_size", int), ("seed", int)):
        s.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)

    m = sub.add_parser("match", help="run reference matching over a dataset manifest")
    m.add_argument("manifest")
    m.add_argument("out_dir")
    m.add_argument("--unpaired", action="store_true",
                   help="random reference shuffling instead of matching")
    m.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train the dehazer on a matched dataset")
    t.add_argument("manifest")
    t.add_argument("matches_dir")
    t.add_argument("out_dir")
    for key, typ in (("iterations", int), ("lr", float), ("kernel_size", int),
                     ("levels", int), ("seed", int)):
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)
    t.add_argument("--holdout-frames", dest="holdout_frames",
                   help="comma-separated frame indices excluded from training")
    t.add_argument("--precision", choices=["f32", "f64"])
    t.add_argument("--flow", choices=["truth", "blockmatch", "file"])

    d = sub.add_parser("dehaze", help="run trained inference over a video")
    d.add_argument("checkpoint")
    d.add_argument("frames_dir")
    d.add_argument("out_dir")
    d.add_argument("--flow-dir", dest="flow_dir")
    d.add_argument("--flow", choices=["truth", "blockmatch", "file"])
    for key, typ in (("kernel_size", int), ("levels", int), ("seed", int)):
        d.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ)

    e = sub.add_parser("eval", help="PSNR/SSIM of outputs against ground truth")
    e.add_argument("outputs_dir")
    e.add_argument("clear_dir")
    e.add_argument("--report", help="write the JSON report here")

    g = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    g.add_argument("--seeds", type=int, default=20)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import pipeline
    from .training import NumericalError

    try:
        if args.command == "synth":
            out = pipeline.synth_dataset(_scene_params(args), args.out_dir)
            print(f"dataset written to {out}")
        elif args.command == "match":
            summary = pipeline.match_command(
                args.manifest, args.out_dir, unpaired=args.unpaired,
                seed=apply_seed_override(args.seed or 0),
            )
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train":
            result = pipeline.train_command(args.manifest, args.matches_dir,
                                            args.out_dir, _train_config(args))
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.command == "dehaze":
            cfg = _train_config(args)
            pipeline.dehaze_command(args.checkpoint, args.frames_dir, args.out_dir,
                                    cfg, flow_dir=args.flow_dir)
            print(f"outputs written to {args.out_dir}")
        elif args.command == "eval":
            report = pipeline.eval_command(args.outputs_dir, args.clear_dir, args.report)
            print(json.dumps({k: report[k] for k in ("mean_psnr", "mean_ssim")}, indent=2))
        elif args.command == "gradcheck":
            result = pipeline.gradcheck_command(seeds=args.seeds)
            width = max(len(k) for k in result["results"])
            for name, err in sorted(result["results"].items()):
                status = "ok" if err < result["tolerance"] else "FAIL"
                print(f"{name:<{width}}  {err:.3e}  {status}")
            if not result["passed"]:
                return 2
            print(f"all operators within {result['tolerance']:.0e}")
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

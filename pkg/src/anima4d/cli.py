"""Command line entry points.

Commands: ingest, train, render, eval, dump-defaults, gradcheck, sample-hist.
Exit codes: 0 success, 1 check failure, 2 config error, 3 data error,
4 guidance-provider failure. ANIMA4D_THREADS caps torch worker threads
(default 1, which is also the bit-exact determinism mode).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import Config, default_config, load_config
from .errors import (ConfigError, DataFormatError, InvalidInputError, ProtocolError,
                     RetryableTransportError)
from .images import (FrameRecord, read_manifest, read_pfm, read_pgm, read_ppm,
                     write_manifest, write_pfm, write_pgm, write_ppm)
from .losses import ReferenceData, load_reference, save_reference
from .metrics import evaluate_frames
from .renderer import CameraPose, reference_pose, render_frames
from .sampling import anchor_histogram, timestep_sampler_from_config
from .trainer import (gradient_audit, synthesize_reference, train_dynamic, train_refine,
                      train_static)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")


def _load_cfg(args: argparse.Namespace) -> Config:
    cfg = load_config(args.config) if args.config else default_config()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg.validate()


def _run_dir(args: argparse.Namespace, cfg: Config) -> Path:
    return Path(args.run_dir) if args.run_dir else Path(cfg["io.run_dir"])


# --------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    run_dir = _run_dir(args, cfg)
    if args.synthesize:
        ref = synthesize_reference(cfg)
    else:
        if not args.image or not args.mask:
            raise ConfigError("ingest needs --image and --mask (or --synthesize)")
        rgb = read_ppm(args.image)
        mask = (read_pgm(args.mask) > 0.5).astype(np.float32)
        depth = None
        if args.depth:
            depth = read_pfm(args.depth)
            if depth.ndim != 2:
                raise DataFormatError("depth must be a single-channel PFM")
        else:
            warnings.warn("no depth map given; the depth loss term is disabled")
        ref = ReferenceData(rgb=rgb, mask=mask, depth=depth)
    save_reference(run_dir, ref)
    print(f"reference bundle written to {run_dir} "
          f"({ref.rgb.shape[1]}x{ref.rgb.shape[0]}, depth={'yes' if ref.depth is not None else 'no'})")
    return 0


def _require_ckpt(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataFormatError(f"missing {path.name} — run the {stage} stage first")
    return path


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    run_dir = _run_dir(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.dump())
    if not (run_dir / "reference.ppm").exists():
        raise DataFormatError(f"no reference bundle in {run_dir}; run ingest first")
    ref = load_reference(run_dir)

    stages = ["static", "coarse", "refine"] if args.stage == "all" else [args.stage]
    for stage in stages:
        if stage == "static":
            path = train_static(cfg, ref, run_dir)
        elif stage == "coarse":
            static_ckpt = _require_ckpt(run_dir / "ckpt_static", "static")
            path = train_dynamic(cfg, static_ckpt, ref, run_dir)
        else:
            coarse = Path(cfg["trainer.coarse_ckpt"]) if cfg["trainer.coarse_ckpt"] \
                else run_dir / "ckpt_coarse"
            path = train_refine(cfg, _require_ckpt(coarse, "coarse"), ref, run_dir)
        print(path)
    return 0


def _render_plan(args: argparse.Namespace, cfg: Config) -> list[tuple[CameraPose, float]]:
    n_frames = args.frames if args.frames else cfg["sampling.frames_per_clip"]
    times = [float(t) for t in np.linspace(0.0, 1.0, n_frames)]
    radius, fov = cfg["render.radius"], cfg["render.fov_deg"]
    if args.mode == "turntable":
        return [(CameraPose(90.0, float(az), radius, fov), t)
                for az in np.arange(10) * 36.0 for t in times]
    if args.mode == "reference_clip":
        pose = reference_pose(radius, fov)
        return [(pose, t) for t in times]
    if not args.traj:
        raise ConfigError("--mode custom needs --traj MANIFEST")
    return [(CameraPose(r.polar_deg, r.azimuth_deg, r.radius, r.fov_deg), r.time)
            for r in read_manifest(args.traj)]


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    model, meta = load_checkpoint(args.ckpt)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    height = args.height if args.height else cfg["render.train_height"]
    width = args.width if args.width else cfg["render.train_width"]
    plan = _render_plan(args, cfg)
    background = np.asarray(cfg["render.background"], dtype=np.float64)

    records = []
    with torch.no_grad():
        for i, (pose, t) in enumerate(plan):
            out = render_frames(model, [pose], [t], height, width,
                                cfg["render.samples_per_ray"], background)[0]
            write_ppm(out_dir / f"frame_{i:04d}.ppm", out.rgb_np())
            write_pgm(out_dir / f"mask_{i:04d}.pgm", out.opacity_np())
            if cfg["io.save_depth"]:
                write_pfm(out_dir / f"depth_{i:04d}.pfm", out.depth_np())
            records.append(FrameRecord(i, pose.polar_deg, pose.azimuth_deg, pose.radius,
                                       pose.fov_deg, t))
    write_manifest(out_dir / "manifest.txt", records)
    print(f"{len(records)} frames ({meta['stage']} checkpoint) -> {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = evaluate_frames(args.frames_dir, cfg)
    json_path = Path(args.json) if args.json else Path(args.frames_dir) / "metrics.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    header = f"{'index':>5} {'time':>7} {'polar':>7} {'azimuth':>8} {'psnr':>7}"
    has_iou = any("iou" in e for e in report["frames"])
    print(header + (f" {'iou':>6}" if has_iou else ""))
    for e in report["frames"]:
        line = (f"{e['index']:>5} {e['time']:>7.3f} {e['polar_deg']:>7.1f} "
                f"{e['azimuth_deg']:>8.1f} {e['psnr']:>7.2f}")
        if "iou" in e:
            line += f" {e['iou']:>6.3f}"
        print(line)
    summary = f"psnr mean {report['psnr_mean']:.2f} min {report['psnr_min']:.2f}"
    if "iou_mean" in report:
        summary += f" | iou mean {report['iou_mean']:.3f}"
    if "temporal_consistency" in report:
        summary += f" | consistency {report['temporal_consistency']:.4f}"
    print(summary)
    print(f"json -> {json_path}")
    return 0


def cmd_dump_defaults(args: argparse.Namespace) -> int:
    print(default_config().dump(annotate=args.annotate), end="")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    report = gradient_audit(cfg)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


def cmd_sample_hist(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    sampler = timestep_sampler_from_config(cfg)
    rng = np.random.default_rng(cfg["trainer.seed"])
    hist = anchor_histogram(sampler, args.draws, args.bins, rng)
    print(f"# draws={hist['draws']} start_fraction={hist['start_fraction']!r} "
          f"end_fraction={hist['end_fraction']!r} clamped_fraction={hist['clamped_fraction']!r}")
    print("bin_lo,bin_hi,count")
    edges, counts = hist["bin_edges"], hist["bin_counts"]
    for i in range(len(counts)):
        print(f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(counts[i])}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anima4d",
                                     description="Image-to-4D scene animation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and store the reference bundle")
    p.add_argument("--image", help="reference RGB (PPM)")
    p.add_argument("--mask", help="foreground mask (PGM)")
    p.add_argument("--depth", help="reference depth (PFM, optional)")
    p.add_argument("--synthesize", action="store_true",
                   help="render the bundle from the analytic oracle instead")
    p.add_argument("--run-dir")
    _add_config_args(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="run one stage or the full schedule")
    p.add_argument("--stage", choices=["static", "coarse", "refine", "all"], required=True)
    p.add_argument("--run-dir")
    _add_config_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="export frames from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["turntable", "reference_clip", "custom"],
                   default="turntable")
    p.add_argument("--traj", help="manifest file for --mode custom")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--frames", type=int, help="times per view (default config N_f)")
    _add_config_args(p)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="score a frame directory against the oracle")
    p.add_argument("frames_dir")
    p.add_argument("--json", help="metrics output path (default <frames>/metrics.json)")
    _add_config_args(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("dump-defaults", help="print the default config")
    p.add_argument("--annotate", action="store_true",
                   help="append help text and full-scale reference values")
    p.set_defaults(fn=cmd_dump_defaults)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_args(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sample-hist", help="timestep sampling histogram as CSV")
    p.add_argument("--draws", type=int, default=10000)
    p.add_argument("--bins", type=int, default=50)
    _add_config_args(p)
    p.set_defaults(fn=cmd_sample_hist)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("ANIMA4D_THREADS", "1"))))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, InvalidInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (RetryableTransportError, ProtocolError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

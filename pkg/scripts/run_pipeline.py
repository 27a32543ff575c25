#!/usr/bin/env python3
"""End-to-end desk-scale demo: synthesize a reference image from the analytic
oracle, run all three training stages, export a turntable, and score it.

    python scripts/run_pipeline.py --run-dir runs/demo          # ~30 min on CPU
    python scripts/run_pipeline.py --run-dir runs/quick --fast  # ~1 min sanity pass
"""

import argparse
import sys

from anima4d.cli import main as anima4d

FAST_OVERRIDES = [
    "encoding.levels=4", "encoding.min_res=4", "encoding.max_res=32",
    "encoding.time_slices=4", "field.hidden_dim=16",
    "render.train_height=24", "render.train_width=24", "render.samples_per_ray=24",
    "sampling.frames_per_clip=4",
    "trainer.iters_static=40", "trainer.iters_dynamic=60", "trainer.iters_refine=20",
    "guidance.oracle.samples_per_ray=48",
]


def run(args: list[str]) -> None:
    print("+ anima4d " + " ".join(args))
    code = anima4d(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--run-dir", default="runs/demo")
    ap.add_argument("--fast", action="store_true", help="tiny settings, minutes not hours")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    overrides = (FAST_OVERRIDES if args.fast else []) + args.set
    setflags = [x for kv in overrides for x in ("--set", kv)]
    rd = ["--run-dir", args.run_dir]

    run(["ingest", "--synthesize"] + rd + setflags)
    run(["train", "--stage", "all"] + rd + setflags)
    run(["render", "--ckpt", f"{args.run_dir}/ckpt_refine", "--mode", "turntable",
         "--out", f"{args.run_dir}/frames"] + setflags)
    run(["eval", f"{args.run_dir}/frames"] + setflags)


if __name__ == "__main__":
    main()

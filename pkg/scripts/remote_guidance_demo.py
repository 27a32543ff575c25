#!/usr/bin/env python3
"""Run the static stage against guidance served over the wire protocol.

Starts a loopback gradient server backed by the analytic oracles, points the
trainer at it with guidance.provider=remote, and trains a handful of
iterations — the full client/server path a real diffusion backend would use.
"""

import argparse
import tempfile

from anima4d.config import default_config
from anima4d.guidance import build_oracle_providers
from anima4d.trainer import synthesize_reference, train_static
from anima4d.wire import ProviderServer

TINY = [
    "encoding.levels=3", "encoding.min_res=4", "encoding.max_res=16",
    "field.hidden_dim=16", "render.train_height=16", "render.train_width=16",
    "render.samples_per_ray=16", "guidance.oracle.samples_per_ray=32",
    "trainer.iters_static=10", "trainer.log_every=2",
]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()

    cfg = default_config().with_overrides(TINY + [f"trainer.iters_static={args.iters}"])
    server = ProviderServer(build_oracle_providers(cfg)).start()
    print(f"serving oracle gradients on {server.endpoint}")
    try:
        cfg = cfg.with_overrides([
            "guidance.provider=remote",
            f"guidance.remote.endpoint={server.endpoint}",
        ]).validate()
        ref = synthesize_reference(cfg)
        with tempfile.TemporaryDirectory() as run_dir:
            ckpt = train_static(cfg, ref, run_dir)
            print(f"trained over the wire -> {ckpt.name} (run dir was temporary)")
    finally:
        server.stop()


if __name__ == "__main__":
    main()

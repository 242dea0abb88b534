#!/usr/bin/env python3
"""Compare the guidance mix endpoints on the night and sensor presets.

For each preset this trains mlp+mg once with the fusion guided toward the 2D
branch (mix 1.0) and once toward the 3D branch (mix 0.0), over several seeds,
then prints which endpoint wins on target 2D3D mIoU. The expected outcome:
the degraded modality's preset prefers guidance toward the other branch.

Usage:
    python scripts/guidance_mix_study.py --out out/mix_study [--seeds 0 1 2 3 4]
"""
import argparse
import os

import numpy as np

from mgfuse import runner
from mgfuse.config import resolve_config


def cell_doc(root, preset, lam, seeds):
    return {
        "name": f"{preset}_mix{lam:g}",
        "variant": "mlp+mg",
        "preset": preset,
        "seeds": list(seeds),
        "output_dir": os.path.join(root, f"{preset}_mix{lam:g}"),
        "dataset": {"num_points": 384, "num_source": 32, "num_target": 48, "seed": 1000},
        "weights": {"lambda_guide": lam},
        "train": {"batch_size": 6, "max_iterations": 1000, "eval_every": 100},
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="out/mix_study")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()

    for preset in ("night", "sensor"):
        means = {}
        for lam in (0.0, 1.0):
            cfg = resolve_config(cell_doc(args.out, preset, lam, args.seeds))
            outcome = runner.run(cfg, force=args.force)
            means[lam] = float(np.mean([r.miou_2d3d for r in outcome.table.rows]))
        winner = max(means, key=means.get)
        print(f"{preset}: mix0={100 * means[0.0]:.1f} mix1={100 * means[1.0]:.1f} "
              f"-> guide toward {'3D' if winner == 0.0 else '2D'} wins")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

#!/usr/bin/env python3
"""Run the fusion-variant ablation grid and print the summary table.

Usage:
    python scripts/reproduce_ablation.py [--config configs/ablation_night.json] [--force]

Grid cells are cached by config fingerprint, so interrupting and re-running
resumes where it stopped. Expect roughly 10 minutes per (variant, seed) cell
budgeted in the shipped config; the grid writes results.md, results.json and
ablation.png into the config's output_dir.
"""
import argparse
import json

from mgfuse import runner
from mgfuse.config import resolve_grid


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/ablation_night.json")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()
    with open(args.config) as f:
        configs = resolve_grid(json.load(f))
    outcome = runner.ablate(configs, force=args.force)
    print(outcome.table.to_markdown())
    if outcome.failed_cells:
        print(f"failed cells: {outcome.failed_cells}")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

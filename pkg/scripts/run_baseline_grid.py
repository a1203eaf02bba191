#!/usr/bin/env python3
"""Fan out the dense / sparse-evolved / static-sparse comparison.

Launches one training process per (variant, seed) via the CLI and drops all
runs under one output root, ready for plot_curves.py.

Usage: python3 scripts/run_baseline_grid.py --preset coopgrid --seeds 5 \
           --sparsity 0.9 --out runs/grid
"""
import argparse
import subprocess
import sys

VARIANTS = {
    "dense": ["--sparsity", "0", "--set", "evolve=false"],
    "evolved": [],  # sparsity set below; full recipe on
    "static": ["--set", "evolve=false", "--operator", "max",
               "--set", "batch_offline=32", "--set", "batch_online=0",
               "--lambda", "0"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="coopgrid")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--sparsity", type=float, default=0.9)
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--jobs", type=int, default=1,
                    help="concurrent training processes")
    args = ap.parse_args()

    jobs = []
    for name, extra in VARIANTS.items():
        for seed in range(args.seeds):
            cmd = [sys.executable, "-m", "sparsemarl", "train",
                   "--preset", args.preset, "--out", f"{args.out}/{name}",
                   "--seed", str(seed)]
            if name != "dense":
                cmd += ["--sparsity", str(args.sparsity)]
            cmd += extra
            jobs.append(cmd)

    running = []
    failed = 0
    for cmd in jobs:
        while len(running) >= args.jobs:
            done = [p for p in running if p.poll() is not None]
            for p in done:
                failed += p.returncode != 0
                running.remove(p)
            if not done:
                running[0].wait()
        print(" ".join(cmd), flush=True)
        running.append(subprocess.Popen(cmd))
    for p in running:
        failed += p.wait() != 0
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Render learning curves from one or more run metrics.csv files.

Usage: python3 scripts/plot_curves.py runs/*/metrics.csv -o curves.png
Groups runs by (env, algorithm, sparsity) read from the sibling manifest.
"""
import argparse
import csv
import json
from collections import defaultdict
from pathlib import Path


def load_run(path: Path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    steps = [int(r["step"]) for r in rows]
    returns = [float(r["mean_return"]) for r in rows]
    label = path.parent.name
    manifest = path.parent / "manifest.json"
    if manifest.exists():
        cfg = json.loads(manifest.read_text())["config"]
        label = f"{cfg['env']}-{cfg['algorithm']}-S{cfg['sparsity']:g}"
    return label, steps, returns


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("metrics", nargs="+", type=Path)
    ap.add_argument("-o", "--out", default="curves.png")
    args = ap.parse_args()

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    grouped = defaultdict(list)
    for path in args.metrics:
        label, steps, returns = load_run(path)
        grouped[label].append((steps, returns))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, runs in sorted(grouped.items()):
        lmin = min(len(s) for s, _ in runs)
        steps = runs[0][0][:lmin]
        data = np.array([r[:lmin] for _, r in runs])
        mean = data.mean(axis=0)
        ax.plot(steps, mean, label=f"{label} (n={len(runs)})")
        if len(runs) > 1:
            ax.fill_between(steps, data.min(axis=0), data.max(axis=0), alpha=0.15)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return (greedy eval)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    print(args.out)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Heatmaps of a router report: one panel per task, rows are sites, columns experts.

    python scripts/plot_router.py runs/desk/router_report.csv -o router.png

Needs matplotlib (``pip install matplotlib``); the package itself does not.
"""

import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def load(path):
    cells = defaultdict(dict)
    experts, sites = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            site = f"{row['layer']}.{row['site']}"
            cells[row["task"]][(site, row["expert"])] = float(row["mean_weight"])
            if row["expert"] not in experts:
                experts.append(row["expert"])
            if site not in sites:
                sites.append(site)
    return cells, sites, experts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("report")
    ap.add_argument("-o", "--output", default="router_report.png")
    args = ap.parse_args()

    cells, sites, experts = load(args.report)
    tasks = sorted(cells)
    fig, axes = plt.subplots(1, len(tasks), figsize=(3 + 2.2 * len(tasks), 0.5 * len(sites) + 2), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        grid = np.array([[cells[task].get((s, e), np.nan) for e in experts] for s in sites])
        im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_title(task)
        ax.set_xticks(range(len(experts)), experts, rotation=45, ha="right")
        ax.set_yticks(range(len(sites)), sites)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="mean routing weight")
    fig.savefig(args.output, dpi=150, bbox_inches="tight")
    print(args.output)


if __name__ == "__main__":
    main()

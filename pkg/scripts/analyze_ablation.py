"""Break ablation results down by seed pairing and by report type.

Reads the results written by ``run_ablation.py`` and prints paired per-seed
differences against the baseline, test-split medians, and mean val IoU
separately for reports that name the region and reports that do not.

    python scripts/analyze_ablation.py --results artifacts/ablation/results.json
"""
import argparse
import json
import statistics

import numpy as np

from knowmvg.config import RunConfig, from_dict
from knowmvg.data import REGIONS
from knowmvg.pipeline import CELLS, cell_config, prepare


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--results", default="artifacts/ablation/results.json")
    args = ap.parse_args()
    results = json.load(open(args.results))
    runs = results["runs"]
    cfg = from_dict({**results["config"], "seed": 0}) if results.get("config") else RunConfig()
    seeds = sorted({r["seed"] for r in runs.values()})
    cells = [name for name, _, _ in CELLS]

    def miou(seed, cell, split="val"):
        return runs[f"{seed}/{cell}"][split]["miou"]

    print("seeds", seeds)
    for cell in cells[1:]:
        diffs = [miou(s, cell) - miou(s, "baseline") for s in seeds]
        print(f"{cell:<8} - baseline (val, paired): {[round(d, 4) for d in diffs]}  "
              f"mean {np.mean(diffs):+.4f}  median {statistics.median(diffs):+.4f}")
    print("test medians:", {c: round(statistics.median(miou(s, c, "test") for s in seeds), 4) for c in cells})

    by_kind = {c: {"named": [], "free": []} for c in cells}
    for seed in seeds:
        val = prepare(cell_config(cfg, seed, True, True))[0]["val"]
        free = np.array([not any(region in s.report for region in REGIONS) for s in val])
        for c in cells:
            iou = np.array(runs[f"{seed}/{c}"]["val"]["per_sample_iou"])
            by_kind[c]["named"].append(iou[~free].mean())
            by_kind[c]["free"].append(iou[free].mean())
    print("mean val IoU by report type (averaged over seeds):")
    for c in cells:
        print(f"  {c:<8} region named {np.mean(by_kind[c]['named']):.4f}   region omitted {np.mean(by_kind[c]['free']):.4f}")


if __name__ == "__main__":
    main()
